"""Command-line interface: subcommands, configuration and exit codes."""

import json

import numpy as np
import pytest

from exitflow import cli, formats

pytestmark = pytest.mark.filterwarnings("ignore")


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_list_problems(capsys):
    code, out, _ = run(capsys, "list-problems")
    assert code == 0
    assert {line.split()[0] for line in out.splitlines()} >= {"eikonal-disk", "focus", "ex1", "ex2"}


def test_list_problems_json(capsys):
    code, out, _ = run(capsys, "list-problems", "--json")
    ids = [d["id"] for d in json.loads(out)]
    assert code == 0 and "saddle" in ids


@pytest.mark.parametrize("pid", ["eikonal-disk", "ex1"])
def test_validate(capsys, pid):
    code, out, _ = run(capsys, "validate", "--problem", pid)
    assert code == 0 and "passed" in out


def test_grid_writes_artifacts(capsys, tmp_path):
    code, out, _ = run(capsys, "grid", "--problem", "eikonal-disk", "--box", "-2,2", "--h", "0.1",
                       "--point", "2,0", "--out", tmp_path, "--no-timestamp")
    assert code == 0
    assert "V(2, 0) = 1" in out
    g = formats.read_grid(tmp_path / "grid.json")
    assert g.provenance == "grid-oracle" and g.shape == (41, 41)
    c = formats.read_grid(tmp_path / "grid.csv")
    np.testing.assert_array_equal(c.values, g.values)


def test_characteristics_writes_artifacts(capsys, tmp_path):
    code, out, _ = run(capsys, "characteristics", "--problem", "focus", "--box", "-1,1", "--h", "0.1",
                       "--seeds", "32", "--T", "1.2", "--step", "1.3e-3", "--out", tmp_path,
                       "--no-timestamp")
    assert code == 0
    assert "t_c in [1, 1]" in out
    for name in ("characteristics.csv", "field.json", "field.csv", "conjugate.json", "ridge.json"):
        assert (tmp_path / name).exists()
    reports = json.loads((tmp_path / "conjugate.json").read_text())["reports"]
    assert all(abs(r["t_c"] - 1) <= 1e-6 for r in reports)
    cols = formats.read_characteristics_csv(tmp_path / "characteristics.csv")
    assert set(cols["seed"]) == set(range(32))


def test_outputs_are_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        run(capsys, "grid", "--problem", "ex1", "--h", "0.2", "--out", tmp_path / d, "--no-timestamp")
    for name in ("grid.json", "grid.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_timestamp_on_by_default(capsys, tmp_path):
    run(capsys, "grid", "--problem", "ex1", "--h", "0.2", "--out", tmp_path)
    assert "created" in json.loads((tmp_path / "grid.json").read_text())["meta"]


def test_certify_grants_on_disk(capsys, tmp_path):
    code, out, _ = run(capsys, "certify", "--problem", "eikonal-disk", "--point", "2,0",
                       "--out", tmp_path, "--no-timestamp")
    assert code == 0 and "granted C1" in out
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert cert["granted"] and cert["level"] == "C1"


def test_certify_refuses_at_focus(capsys, tmp_path):
    code, out, _ = run(capsys, "certify", "--problem", "focus", "--point", "0.01,0",
                       "--out", tmp_path, "--no-timestamp")
    assert code == 0 and "refused" in out
    assert not json.loads((tmp_path / "certificate.json").read_text())["granted"]


def test_certify_point_in_target_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "certify", "--problem", "eikonal-disk", "--point", "0.5,0",
                       "--out", tmp_path)
    assert code == 2 and "error" in err


def test_compare_bound(capsys, tmp_path):
    run(capsys, "grid", "--problem", "eikonal-disk", "--box", "-2,2", "--h", "0.1",
        "--out", tmp_path / "a", "--no-timestamp")
    g = formats.read_grid(tmp_path / "a" / "grid.json")
    far = np.linalg.norm(g.points(), axis=-1) > 1.5
    g.values[far] += 0.05
    formats.write_grid_json(g, tmp_path / "b.json")
    a = tmp_path / "a" / "grid.json"
    code, out, _ = run(capsys, "compare", a, tmp_path / "b.json", "--bound", "0.1",
                       "--out", tmp_path / "c")
    assert code == 0 and "sup" in out
    code, _, _ = run(capsys, "compare", a, tmp_path / "b.json", "--bound", "0.01",
                     "--out", tmp_path / "c")
    assert code == 1
    code, _, _ = run(capsys, "compare", a, tmp_path / "b.json", "--bound", "0.01",
                     "--mask-box", "-0.5,-0.5,0.5,0.5", "--out", tmp_path / "c")
    assert code == 0


def test_compare_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "compare", tmp_path / "x.json", tmp_path / "y.json")
    assert code == 2 and "no such file" in err


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        '[problem]\nid = "eikonal-disk"\n'
        "[grid]\nbox = [[-2.0, -2.0], [2.0, 2.0]]\nh = 0.2\n"
        f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\ntimestamp = false\n'
    )
    code, _, _ = run(capsys, "grid", "--config", cfg)
    assert code == 0
    assert formats.read_grid(tmp_path / "out" / "grid.json").h == 0.2
    code, _, _ = run(capsys, "grid", "--config", cfg, "--h", "0.25")
    assert code == 0
    assert formats.read_grid(tmp_path / "out" / "grid.json").h == 0.25


def test_problem_params_from_config(capsys, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('[problem]\nid = "eikonal-disk"\nparams = { radius = 0.5 }\n'
                   "[grid]\nbox = [-2.0, 2.0]\nh = 0.1\n")
    code, out, _ = run(capsys, "grid", "--config", cfg, "--point", "1,0", "--out", tmp_path / "o")
    assert code == 0
    v = float(formats.read_grid(tmp_path / "o" / "grid.json").interp(np.array([1.0, 0.0])))
    assert v == pytest.approx(0.5, abs=0.1)


@pytest.mark.parametrize("body", ['[grid]\nspacing = 1\n', "not toml [", '[problem]\nid = "nope"\n'])
def test_bad_config_is_usage_error(capsys, tmp_path, body):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(body)
    code, _, _ = run(capsys, "grid", "--config", cfg, "--out", tmp_path)
    assert code == 2


@pytest.mark.parametrize("argv", [["grid", "--problem", "eikonal-disk", "--h", "-1"],
                                  ["grid", "--problem", "eikonal-disk", "--box", "1,2,3"],
                                  ["grid"], ["frobnicate"], []])
def test_usage_errors(capsys, tmp_path, argv):
    code, _, _ = run(capsys, *argv, *(["--out", tmp_path] if argv[:1] == ["grid"] else []))
    assert code == 2
