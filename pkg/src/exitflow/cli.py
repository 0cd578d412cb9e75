"""Command-line front end.

Subcommands::

    exitflow characteristics --problem eikonal-disk --box -3,3 --h 0.05 --seeds 128 --T 3
    exitflow grid --problem ex2 --h 0.05 --point 1,0
    exitflow certify --problem eikonal-disk --point 2,0
    exitflow compare a.json b.json --bound 0.1
    exitflow list-problems
    exitflow validate --problem ex1

Settings come from an optional TOML file (``--config``) whose sections mirror
the flags; flags win over file values.  Exit codes: 0 success, 1 numeric
failure, 2 usage error.

Config schema (every key optional)::

    [problem]
    id = "eikonal-disk"
    params = { radius = 1.0 }       # keyword arguments of the catalog builder

    [grid]
    box = [[-3.0, -3.0], [3.0, 3.0]]
    h = 0.05

    [sweep]
    seeds = 128
    horizon = 3.0
    step = 1e-3
    record_every = 0                # 0 picks about two records per cell
    fan = 0                         # -1 uses the catalog default

    [oracle]
    controls = 64
    tol = 1e-9

    [tolerances]
    conjugate = 1e-9                # determinant / singular-value dip
    bracket = 1e-8                  # refinement bracket width
    conservation = 1e-6             # max |H| along characteristics

    [certify]
    point = [2.0, 0.0]
    order = 1

    [output]
    dir = "exitflow-out"
    timestamp = true

    [compare]
    bound = 0.1                     # exit 1 above this sup error
    mask_box = [[1.1, -3.0], [3.0, 3.0]]
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import catalog, formats
from .characteristics import integrate_backward, sweep
from .conjugate import detect_conjugate_like, detect_conjugate_time, regularity_certificate
from .errors import CompatibilityWarning, ExitFlowError, InvalidInputError, NoDataError
from .grid import parse_box
from .oracle import solve_grid
from .problem import validate_assumptions
from .terminal import TerminalCovector, chart_seed_data
from .value_field import (analytic_grid, build_field, check_proximal_subdifferential,
                          compare_fields, default_curvature, detect_multivalued)

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad command line or configuration (exit code 2)."""


# closed forms used for reporting, keyed by catalog id
EXACT = {
    "eikonal-disk": lambda x: np.linalg.norm(x, axis=-1) - 1.0,
    "focus": lambda x: 1.0 - np.linalg.norm(x, axis=-1),
    "ex1": catalog.ex1_value,
}


@dataclass
class RunConfig:
    problem: Optional[str] = None
    params: dict = field(default_factory=dict)
    box: Optional[tuple] = None
    h: float = 0.05
    seeds: int = 128
    horizon: Optional[float] = None
    step: float = 1e-3
    record_every: int = 0
    fan: int = -1
    controls: int = 64
    oracle_tol: float = 1e-9
    tol_conjugate: float = 1e-9
    tol_bracket: float = 1e-8
    tol_conservation: float = 1e-6
    point: Optional[tuple] = None
    order: int = 1
    out: str = "exitflow-out"
    timestamp: bool = True
    inputs: list = field(default_factory=list)
    bound: Optional[float] = None
    mask_box: Optional[tuple] = None
    as_json: bool = False

    def validate(self) -> "RunConfig":
        for name in ("h", "step", "oracle_tol", "tol_conjugate", "tol_bracket", "tol_conservation"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.seeds < 1:
            raise UsageError("seeds must be >= 1")
        if self.horizon is not None and not self.horizon > 0:
            raise UsageError("horizon must be positive")
        if self.record_every < 0:
            raise UsageError("record_every must be >= 0")
        if self.order < 1:
            raise UsageError("order must be >= 1")
        for name in ("box", "mask_box"):
            b = getattr(self, name)
            if b is not None:
                try:
                    parse_box(b)
                except InvalidInputError as exc:
                    raise UsageError(str(exc)) from None
        return self


# ---------------------------------------------------------------------------
# config assembly

_FILE_KEYS = {
    ("problem", "id"): "problem", ("problem", "params"): "params",
    ("grid", "box"): "box", ("grid", "h"): "h",
    ("sweep", "seeds"): "seeds", ("sweep", "horizon"): "horizon", ("sweep", "step"): "step",
    ("sweep", "record_every"): "record_every", ("sweep", "fan"): "fan",
    ("oracle", "controls"): "controls", ("oracle", "tol"): "oracle_tol",
    ("tolerances", "conjugate"): "tol_conjugate", ("tolerances", "bracket"): "tol_bracket",
    ("tolerances", "conservation"): "tol_conservation",
    ("certify", "point"): "point", ("certify", "order"): "order",
    ("output", "dir"): "out", ("output", "timestamp"): "timestamp",
    ("compare", "bound"): "bound", ("compare", "mask_box"): "mask_box",
}


def load_config_file(path) -> dict:
    """Flatten a TOML config into ``RunConfig`` keyword arguments."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None
    out = {}
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise UsageError(f"config key '{section}' must be a section")
        for key, value in body.items():
            name = _FILE_KEYS.get((section, key))
            if name is None:
                raise UsageError(f"unknown config key [{section}] {key}")
            out[name] = value
    return out


def _floats(text: str):
    try:
        return [float(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def box_from_text(text) -> tuple:
    """``"a,b"`` (same bounds on every axis) or ``"lo1,..,lon,hi1,..,hin"``."""
    if not isinstance(text, str):
        return tuple(tuple(v) if np.ndim(v) else v for v in text)
    v = _floats(text)
    if len(v) < 2 or len(v) % 2:
        raise UsageError(f"box needs an even number of values, got {text!r}")
    k = len(v) // 2
    return (v[0], v[1]) if k == 1 else (tuple(v[:k]), tuple(v[k:]))


def _box_for(box, n: int):
    lo, hi = parse_box(box, n)
    return tuple(lo), tuple(hi)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and v != []:
            values[f.name] = v
    if getattr(args, "no_timestamp", False):
        values["timestamp"] = False
    for key in ("box", "mask_box"):
        if values.get(key) is not None:
            values[key] = box_from_text(values[key])
    if values.get("point") is not None and isinstance(values["point"], str):
        values["point"] = tuple(_floats(values["point"]))
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return cfg.validate()


def _problem(cfg: RunConfig):
    if not cfg.problem:
        raise UsageError("--problem is required")
    try:
        entry = catalog.get(cfg.problem)
        problem, model = entry.make(**dict(cfg.params))
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    box = _box_for(cfg.box if cfg.box is not None else entry.box, problem.dim_state)
    horizon = cfg.horizon if cfg.horizon is not None else entry.horizon
    fan = entry.fan if cfg.fan < 0 else cfg.fan
    return entry, problem, model, box, horizon, fan


def _record_every(cfg: RunConfig, h: float) -> int:
    return cfg.record_every or max(1, int(0.5 * h / cfg.step))


def _outdir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(*parts):
    print(*parts, flush=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_characteristics(cfg: RunConfig) -> int:
    """Seed sweep, value field, ridge and conjugate-time reports."""
    entry, problem, model, box, horizon, fan = _problem(cfg)
    tangent = problem.flags.hamiltonian_c2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CompatibilityWarning)
        sw = sweep(problem, model, cfg.seeds, horizon, cfg.step,
                   record_every=_record_every(cfg, cfg.h), box=_pad(box, cfg.h), tangent=tangent,
                   fan=fan)
    field_ = build_field(sw, box, cfg.h)
    ridge = detect_multivalued(field_)
    out = _outdir(cfg)

    reports, failures = [], []
    for c in sw:
        if c.Y is None or len(c) < 2 or c.selection is not None:
            continue
        try:
            det = detect_conjugate_time(c, tol=cfg.tol_conjugate, width=cfg.tol_bracket)
            reports.append(det.to_dict())
            if c.X is not None:
                reports.append(detect_conjugate_like(c, tol=cfg.tol_conjugate).to_dict())
        except ExitFlowError as exc:
            failures.append({"seed": c.seed_id, "error": type(exc).__name__, "message": str(exc)})

    drift = max((float(np.max(np.abs(c.flow.value(c.states, c.covectors)))) for c in sw if len(c)),
                default=0.0)
    formats.write_characteristics_csv(sw, out / "characteristics.csv")
    formats.write_grid_json(field_, out / "field.json", cfg.timestamp)
    formats.write_grid_csv(field_, out / "field.csv")
    meta = {"problem": entry.id, "seeds": cfg.seeds, "horizon": horizon, "step": cfg.step}
    formats.write_json({"reports": reports, "failures": failures, "meta": meta},
                       out / "conjugate.json", cfg.timestamp)
    formats.write_json({"nodes": ridge.points, "multiplicity": ridge.multiplicity,
                        "covectors": ridge.covectors, "meta": meta},
                       out / "ridge.json", cfg.timestamp)

    events = [r["t_c"] for r in reports if r["t_c"] is not None]
    stops = {}
    for c in sw:
        stops[c.stop_reason] = stops.get(c.stop_reason, 0) + 1
    _say(f"problem {entry.id}: {len(sw)} characteristics, stops "
         + ", ".join(f"{k}={v}" for k, v in sorted(stops.items())))
    reached = field_.finite() & ~field_.in_target
    _say(f"field: {int(reached.sum())} reached nodes, {int((~field_.finite()).sum())} unreached")
    if entry.id in EXACT:
        exact = analytic_grid(EXACT[entry.id], box, cfg.h, problem.dim_state)
        _say(f"sup error vs closed form: {compare_fields(field_, exact).sup:.6g}")
    _say(f"ridge: {len(ridge)} nodes with multiple arrivals")
    if events:
        _say(f"conjugate events: {len(events)} reports, t_c in [{min(events):.9g}, {max(events):.9g}]")
    else:
        _say("conjugate events: none")
    _say(f"max |H| along characteristics: {drift:.3g}")
    _say(f"artifacts written to {out}")
    if failures:
        _say(f"{len(failures)} seeds failed conjugate analysis")
        return EXIT_NUMERIC
    if drift > cfg.tol_conservation:
        _say(f"Hamiltonian drift {drift:.3g} exceeds {cfg.tol_conservation:.3g}")
        return EXIT_NUMERIC
    return EXIT_OK


def _pad(box, h):
    lo, hi = (np.asarray(b, float) for b in box)
    return tuple(lo - 2 * h), tuple(hi + 2 * h)


def cmd_grid(cfg: RunConfig) -> int:
    """Grid-oracle solution of the HJB equation."""
    entry, problem, _, box, _, _ = _problem(cfg)
    grid = solve_grid(problem, box, cfg.h, controls=cfg.controls, tol=cfg.oracle_tol)
    out = _outdir(cfg)
    formats.write_grid_json(grid, out / "grid.json", cfg.timestamp)
    formats.write_grid_csv(grid, out / "grid.csv")
    _say(f"problem {entry.id}: {grid.meta['sweeps']} sweeps, residual {grid.meta['residual']:.3g}, "
         f"{int(grid.finite().sum())} finite nodes of {grid.values.size}")
    if entry.id in EXACT:
        exact = analytic_grid(EXACT[entry.id], box, cfg.h, problem.dim_state)
        _say(f"sup error vs closed form: {compare_fields(grid, exact).sup:.6g}")
    if cfg.point is not None:
        v = float(grid.interp(np.asarray(cfg.point, float)))
        _say(f"V({_pt(cfg.point)}) = {v:.10g}")
    _say(f"artifacts written to {out}")
    return EXIT_OK


def _pt(x):
    return ", ".join(f"{float(v):g}" for v in x)


def _arrival(sw, x, h):
    """Characteristic and time of the cheapest sample arriving near ``x``."""
    X, P, V, T, ids, _, _, _, _ = sw.samples()
    d = x - X
    near = np.linalg.norm(d, axis=-1) <= 2 * h
    if not np.any(near):
        raise NoDataError(f"no characteristic reaches ({_pt(x)})")
    est = np.where(near, V + np.sum(P * d, -1), np.inf)
    k = int(np.argmin(est))
    offs = np.cumsum([0] + [len(c) for c in sw if len(c)])
    chars = [c for c in sw if len(c)]
    ci = int(np.searchsorted(offs, k, side="right") - 1)
    return chars[ci], float(T[k])


def _refine(problem, model, char, x, t, horizon, step, tangent, margin=0.0):
    """Newton on (t, eta) so that the characteristic passes through ``x``.

    Newton runs on a coarse RK4 step; the returned characteristic uses
    ``step`` and stops shortly after ``t + margin`` (later events cannot
    change the certificate).

    Returns ``(None, t)`` when the arrival cannot be refined (selections,
    missing variational data, or a numeric failure); callers then use the
    sampled characteristic as is.
    """
    if char.selection is not None or char.Y is None:
        return None, t
    chart = problem.target.charts()[char.chart_index]
    closed = np.allclose(chart.param(chart.lo[None])[0], chart.param(chart.hi[None])[0], atol=1e-12)
    span = chart.hi - chart.lo
    eta = np.array(char.eta, float)
    coarse = max(step, 1e-2)
    try:
        for _ in range(12):
            c = integrate_backward(problem, model, _seed_of(model, char, eta), eta,
                                   horizon=max(t, coarse), step=coarse, chart=chart,
                                   record_every=10 ** 9)
            if abs(c.times[-1] - max(t, coarse)) > 1e-12:
                return None, t
            r = c.states[-1] - x
            if np.linalg.norm(r) < 1e-12:
                break
            dv = np.linalg.solve(c.Y[-1], r)
            t, eta = t - dv[0], eta - dv[1:]
            if closed:
                eta = chart.lo + np.mod(eta - chart.lo, span)
            if not (0 < t <= horizon) or not chart.contains(eta[None])[0]:
                return None, float(np.clip(t, 0, horizon))
        fine = integrate_backward(problem, model, _seed_of(model, char, eta), eta,
                                  horizon=min(horizon, t + margin + 0.1), step=step, chart=chart,
                                  record_every=max(1, int(round(0.01 / step))), tangent=tangent)
    except (ExitFlowError, np.linalg.LinAlgError):
        return None, t
    return fine, float(t)


def _seed_of(model, char, eta):
    chart = char.problem.target.charts()[char.chart_index]
    sd = chart_seed_data(model, chart, np.atleast_1d(eta))
    return TerminalCovector(sd.z[0], float(sd.mu[0]), sd.phi[0], float(sd.residual[0]))


def cmd_certify(cfg: RunConfig, point=None) -> int:
    """Graded local-regularity certificate at ``point``."""
    entry, problem, model, box, horizon, fan = _problem(cfg)
    point = cfg.point if point is None else point
    if point is None:
        raise UsageError("--point is required")
    x = np.asarray(point, float)
    if x.shape != (problem.dim_state,):
        raise UsageError(f"point must have {problem.dim_state} coordinates")
    h = cfg.h
    tangent = problem.flags.hamiltonian_c2
    scan_step = max(cfg.step, 1e-2)
    local = (tuple(x - 6 * h), tuple(x + 6 * h))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CompatibilityWarning)
        sw = sweep(problem, model, max(cfg.seeds, 512), horizon, scan_step,
                   box=_pad(box, h), fan=fan)
    field_ = build_field(sw, local, h)
    node = field_.nearest_index(x)
    if not np.isfinite(field_.values[node]):
        raise NoDataError(f"({_pt(x)}) is not reached by the sweep")
    if field_.in_target[node]:
        raise UsageError(f"({_pt(x)}) lies in the target")
    mult = int(field_.multiplicity[node])
    char, t = _arrival(sw, x, h)
    fine, t_star = None, t
    if tangent:
        fine, t_star = _refine(problem, model, char, x, t, horizon, cfg.step, tangent, h)
    use = fine if fine is not None else char
    p_star = use.covectors[int(np.argmin(np.abs(use.times - t_star)))]
    try:
        prox = check_proximal_subdifferential(field_, x, p_star, 5 * h, default_curvature(problem))
    except ExitFlowError:
        prox = None
    cert = regularity_certificate(problem, x, use, cfg.order, t_star=t_star, margin=h,
                                  multiplicity=mult, proximal_margin=prox)
    doc = cert.to_dict()
    doc["meta"] = {"problem": entry.id, "h": h, "arrival_seed": int(char.seed_id),
                   "refined": fine is not None}
    out = _outdir(cfg)
    formats.write_json(doc, out / "certificate.json", cfg.timestamp)
    if cert.granted:
        _say(f"certificate at ({_pt(x)}): granted {cert.level} (t* = {t_star:.9g})")
    else:
        _say(f"certificate at ({_pt(x)}): refused")
        for r in cert.reasons:
            _say(f"  reason: {r}")
    for c in cert.caveats:
        _say(f"  caveat: {c}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    """Error statistics between two stored grids."""
    if len(cfg.inputs) != 2:
        raise UsageError("compare needs exactly two grid files")
    try:
        a, b = (formats.read_grid(p) for p in cfg.inputs)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    mask = None
    if cfg.mask_box is not None:
        lo, hi = parse_box(cfg.mask_box, a.dim)
        mask = lambda pts: np.all((pts >= lo) & (pts <= hi), axis=-1)
    stats = compare_fields(a, b, mask)
    _say(formats.dumps(stats.to_dict()).rstrip())
    if cfg.bound is not None and stats.sup > cfg.bound:
        _say(f"sup error {stats.sup:.6g} exceeds bound {cfg.bound:.6g}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_list_problems(cfg: RunConfig) -> int:
    rows = []
    for pid in sorted(catalog.CATALOG):
        e = catalog.CATALOG[pid]
        rows.append({"id": pid, "hypothesis_violating": e.hypothesis_violating,
                     "box": e.box, "horizon": e.horizon, "provenance": e.provenance})
    if cfg.as_json:
        _say(formats.dumps(rows).rstrip())
    else:
        for r in rows:
            tag = " [hypothesis-violating]" if r["hypothesis_violating"] else ""
            _say(f"{r['id']:<14}{r['provenance']}{tag}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    """Assumption checks and closed-form self-tests of catalog problems."""
    ids = [cfg.problem] if cfg.problem else sorted(catalog.CATALOG)
    ok = True
    for pid in ids:
        entry = catalog.get(pid)
        problem, _ = entry.make(**(dict(cfg.params) if cfg.problem else {}))
        report = validate_assumptions(problem)
        checks = entry.self_test()
        passed_checks = all(c["ok"] for c in checks)
        status = report.passed or entry.hypothesis_violating
        ok &= status and passed_checks
        label = "ok" if report.passed else ("violated (declared)" if entry.hypothesis_violating
                                            else "FAILED")
        note = "; declared hypothesis-violating example" if entry.hypothesis_violating else ""
        _say(f"{pid}: assumptions {label}; self-test "
             f"{sum(c['ok'] for c in checks)}/{len(checks)} passed{note}")
        if cfg.as_json:
            _say(formats.dumps({"report": report.to_dict(), "self_test": checks}).rstrip())
        for c in checks:
            if not c["ok"]:
                _say(f"  failed: {c['check']}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exitflow",
                                     description="Exit-time optimal control via characteristics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem=True):
        p.add_argument("--config", help="TOML configuration file")
        if problem:
            p.add_argument("--problem", help="catalog problem id")
        p.add_argument("--out", help="output directory")
        p.add_argument("--no-timestamp", action="store_true",
                       help="omit the creation time from JSON metadata")

    p = sub.add_parser("characteristics", help="seed sweep, value field and conjugate reports")
    common(p)
    p.add_argument("--box")
    p.add_argument("--h", type=float, help="grid spacing of the value field")
    p.add_argument("--seeds", type=int)
    p.add_argument("--T", dest="horizon", type=float, help="horizon")
    p.add_argument("--step", type=float, help="RK4 step")
    p.add_argument("--record-every", type=int)
    p.add_argument("--fan", type=int)
    p.add_argument("--tol-conjugate", type=float)
    p.add_argument("--tol-bracket", type=float)
    p.add_argument("--tol-conservation", type=float)

    p = sub.add_parser("grid", help="grid-oracle HJB solution")
    common(p)
    p.add_argument("--box")
    p.add_argument("--h", type=float)
    p.add_argument("--controls", type=int)
    p.add_argument("--tol", dest="oracle_tol", type=float)
    p.add_argument("--point", help="report V at this point")

    p = sub.add_parser("certify", help="local regularity certificate at a point")
    common(p)
    p.add_argument("--point")
    p.add_argument("--order", type=int)
    p.add_argument("--box")
    p.add_argument("--h", type=float)
    p.add_argument("--seeds", type=int)
    p.add_argument("--T", dest="horizon", type=float)
    p.add_argument("--step", type=float)

    p = sub.add_parser("compare", help="compare two stored value grids")
    common(p, problem=False)
    p.add_argument("inputs", nargs="*", help="two grid files (.json or .csv)")
    p.add_argument("--bound", type=float, help="exit 1 when the sup error exceeds this")
    p.add_argument("--mask-box")

    p = sub.add_parser("list-problems", help="list catalog problems")
    p.add_argument("--json", dest="as_json", action="store_true")

    p = sub.add_parser("validate", help="check assumptions and self-tests")
    p.add_argument("--problem")
    p.add_argument("--json", dest="as_json", action="store_true")
    return parser


_VALUE_FLAGS = ("--box", "--point", "--mask-box")


def _join_negative(argv: Sequence[str]) -> list:
    """Glue ``--box -3,3`` into ``--box=-3,3`` so argparse accepts it."""
    out, argv, i = [], list(argv), 0
    while i < len(argv):
        a = argv[i]
        if a in _VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


COMMANDS = {
    "characteristics": cmd_characteristics, "grid": cmd_grid, "certify": cmd_certify,
    "compare": cmd_compare, "list-problems": cmd_list_problems, "validate": cmd_validate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_join_negative(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"exitflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExitFlowError as exc:
        print(f"exitflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
