"""Value grids from characteristics, the grid oracle and pointwise probes."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exitflow import catalog
from exitflow.characteristics import PiecewiseConstantControl, sweep
from exitflow.errors import (EmptyFieldWarning, IncompatibleGridsError,
                             InsufficientResolutionError, InvalidInputError, IterationLimitError)
from exitflow.grid import ValueGrid
from exitflow.oracle import solve_grid
from exitflow.value_field import (analytic_grid, build_field, check_proximal_subdifferential,
                                  check_superdifferential, compare_fields, default_curvature,
                                  detect_multivalued, dpp_gaps, semiconcavity_bounded,
                                  semiconcavity_probe)

import oracles

BOX = ((-2.5, -2.5), (2.5, 2.5))
H = 0.05


@pytest.fixture(scope="module")
def disk_field(disk):
    problem, model = disk
    s = sweep(problem, model, 256, horizon=1.8, step=5e-3, record_every=2,
              box=((-2.7, -2.7), (2.7, 2.7)))
    return build_field(s, BOX, H)


@pytest.fixture(scope="module")
def focus_field(focus):
    problem, model = focus
    s = sweep(problem, model, 256, horizon=1.2, step=1.3e-3, record_every=5)
    return build_field(s, ((-1.0, -1.0), (1.0, 1.0)), H)


@pytest.fixture(scope="module")
def ex1_field(ex1):
    problem, model = ex1
    s = sweep(problem, model, 512, horizon=3.5, step=1e-2)
    return build_field(s, ((1.0, -2.0), (7.0, 2.0)), H)


def _annulus(lo, hi):
    return lambda x: (np.linalg.norm(x, axis=-1) >= lo) & (np.linalg.norm(x, axis=-1) <= hi)


# ---------------------------------------------------------------------------
# fields from characteristics

def test_disk_field_matches_closed_form(disk_field):
    exact = analytic_grid(oracles.disk_value, BOX, H)
    stats = compare_fields(disk_field, exact, mask=_annulus(1.1, 2.5))
    assert stats.count > 1000
    assert stats.sup <= 5e-3


def test_disk_field_is_single_valued(disk_field):
    assert len(detect_multivalued(disk_field)) == 0
    reached = disk_field.finite() & ~disk_field.in_target
    assert np.all(disk_field.multiplicity[reached] == 1)


def test_disk_field_gradients(disk_field):
    pts = disk_field.points()
    ok = _annulus(1.2, 2.4)(pts)
    g = disk_field.gradients[ok]
    ref = pts[ok] / np.linalg.norm(pts[ok], axis=-1, keepdims=True)
    assert np.max(np.linalg.norm(g - ref, axis=-1)) <= 1e-2


def test_target_nodes_carry_terminal_cost(disk_field):
    assert np.all(disk_field.values[disk_field.in_target] == 0.0)


def test_field_is_nearly_nonnegative(disk_field, focus_field, ex1_field):
    for f in (disk_field, focus_field, ex1_field):
        v = f.values[np.isfinite(f.values)]
        assert v.min() >= -1e-4


def test_boundary_consistency(disk_field):
    """Reached nodes next to the boundary approach psi = 0."""
    pts = disk_field.points()
    r = np.linalg.norm(pts, axis=-1)
    near = (r > 1.0) & (r <= 1.0 + H) & disk_field.finite()
    assert np.max(np.abs(disk_field.values[near])) <= H + 1e-3


def test_ex1_field_matches_closed_form(ex1_field, ex1):
    problem, _ = ex1
    inside = lambda x: ~problem.target.contains(x.reshape(-1, 2)).reshape(x.shape[:-1])
    exact = analytic_grid(oracles.ex1_value, ((1.0, -2.0), (7.0, 2.0)), H)
    stats = compare_fields(ex1_field, exact, mask=inside)
    assert stats.sup <= 1e-10


def test_ex1_ridge_lies_on_the_skeleton(ex1_field):
    ridge = detect_multivalued(ex1_field)
    assert len(ridge) > 0
    y = ridge.points
    off = np.minimum(np.abs(y[:, 1]), np.abs(y[:, 0] - 4.0))
    assert off.max() <= H + 1e-12
    assert ridge.contains_cell([3.0, 0.0], H)


def test_focus_ridge_contains_origin(focus_field):
    ridge = detect_multivalued(focus_field)
    assert ridge.contains_cell([0.0, 0.0], H)
    # front curvature grows like 1/r near the focus; the ridge spreads a few cells
    assert np.max(np.linalg.norm(ridge.points, axis=-1)) <= 4 * H + 1e-12


def test_empty_field_warns(disk):
    problem, model = disk
    s = sweep(problem, model, 8, horizon=0.2, step=1e-2)
    with pytest.warns(EmptyFieldWarning):
        f = build_field(s, ((5.0, 5.0), (6.0, 6.0)), 0.1)
    assert np.all(np.isinf(f.values))


# ---------------------------------------------------------------------------
# grid oracle

def test_oracle_converges_on_disk(disk_oracle):
    exact = analytic_grid(oracles.disk_value, ((-3.0, -3.0), (3.0, 3.0)), 0.05)
    stats = compare_fields(disk_oracle, exact, mask=_annulus(1.0, 2.5))
    assert stats.sup <= 2 * 0.05
    assert disk_oracle.provenance == "grid-oracle"


def test_oracle_on_rhombus_near_closed_form():
    problem, _ = catalog.make_problem("ex1")
    g = solve_grid(problem, ((1.0, -2.0), (7.0, 2.0)), 0.1, controls=16)
    assert float(g.interp(np.array([3.0, 0.5]))) == pytest.approx(oracles.ex1_value([3.0, 0.5]),
                                                                  abs=0.2)


def test_oracle_iteration_limit(disk):
    with pytest.raises(IterationLimitError) as info:
        solve_grid(disk[0], ((-2.0, -2.0), (2.0, 2.0)), 0.1, max_sweeps=1)
    assert info.value.residual is not None


@pytest.mark.parametrize("kwargs", [{"controls": 4}, {"tol": 0.0}])
def test_oracle_rejects_bad_settings(disk, kwargs):
    with pytest.raises(InvalidInputError):
        solve_grid(disk[0], ((-2.0, -2.0), (2.0, 2.0)), 0.1, **kwargs)


# ---------------------------------------------------------------------------
# comparisons

def test_compare_identical_is_zero(disk_oracle):
    assert compare_fields(disk_oracle, disk_oracle).sup == 0.0


def test_compare_rejects_different_layouts(disk_oracle):
    other = analytic_grid(oracles.disk_value, ((-3.0, -3.0), (3.0, 3.0)), 0.1)
    with pytest.raises(IncompatibleGridsError):
        compare_fields(disk_oracle, other)


def test_compare_reports_worst_offenders():
    a = analytic_grid(lambda x: np.zeros(x.shape[:-1]), ((0.0, 0.0), (1.0, 1.0)), 0.5)
    b = ValueGrid(a.lo, a.h, a.values.copy(), "external")
    b.values[1, 2] = 0.25
    stats = compare_fields(a, b, worst=1)
    assert stats.sup == 0.25 and stats.count == 9
    assert stats.worst[0]["x"] == [0.5, 1.0]


def test_grid_rejects_unknown_provenance():
    with pytest.raises(InvalidInputError):
        ValueGrid(np.zeros(2), 0.1, np.zeros((3, 3)), "guess")


@given(x=st.tuples(st.floats(-2, 2), st.floats(-2, 2)).map(np.array))
def test_interpolation_is_exact_for_affine_data(x):
    g = analytic_grid(lambda p: 2 * p[..., 0] - p[..., 1] + 0.5, ((-2.0, -2.0), (2.0, 2.0)), 0.25)
    assert float(g.interp(x)) == pytest.approx(2 * x[0] - x[1] + 0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# probes

def test_superdifferential_of_smooth_value():
    g = analytic_grid(oracles.disk_value, ((-3.0, -3.0), (3.0, 3.0)), 0.05)
    assert check_superdifferential(g, [2.0, 0.0], [1.0, 0.0], r=0.25, c=1.0) >= -1e-12
    assert check_superdifferential(g, [2.0, 0.0], [0.5, 0.0], r=0.25, c=1.0) < 0


def test_proximal_probe_at_focus():
    g = analytic_grid(oracles.focus_value, ((-1.0, -1.0), (1.0, 1.0)), 0.05)
    assert check_superdifferential(g, [0.0, 0.0], [0.0, 0.0], r=0.25, c=1.0) >= 0
    assert check_proximal_subdifferential(g, [0.0, 0.0], [0.0, 0.0], r=0.25, c=1.0) < -0.1


def test_probe_needs_enough_nodes():
    g = analytic_grid(oracles.disk_value, ((-3.0, -3.0), (3.0, 3.0)), 0.05)
    with pytest.raises(InsufficientResolutionError):
        check_superdifferential(g, [2.0, 0.0], [1.0, 0.0], r=0.05, c=1.0)


def test_default_curvature(disk):
    assert default_curvature(disk[0]) == pytest.approx(1.0)


def test_semiconcavity_bounded_for_concave_kink():
    box = ((-1.0, -1.0), (1.0, 1.0))
    qs = [semiconcavity_probe(analytic_grid(oracles.focus_value, box, h), box) for h in (0.1, 0.05)]
    assert semiconcavity_bounded(*qs)


def test_semiconcavity_flags_convex_kink():
    box = ((-1.0, -1.0), (1.0, 1.0))
    kink = lambda x: np.abs(x[..., 0])
    qs = [semiconcavity_probe(analytic_grid(kink, box, h), box) for h in (0.1, 0.05)]
    assert qs[1] == pytest.approx(2 * qs[0], rel=1e-9)
    assert not semiconcavity_bounded(*qs)


# ---------------------------------------------------------------------------
# dynamic programming

def test_dpp_gap_vanishes_on_optimal_control(disk):
    problem, _ = disk
    gaps = dpp_gaps(problem, oracles.disk_value, [2.5, 0.0],
                    PiecewiseConstantControl.constant([-1.0, 0.0]), [0.5, 1.0, 2.0])
    np.testing.assert_allclose(gaps[:2], 0.0, atol=1e-12)
    assert np.isnan(gaps[2])


@given(a=st.floats(0, 2 * np.pi), b=st.floats(0, 2 * np.pi), t1=st.floats(0.1, 0.9))
def test_dpp_gap_is_nonpositive(a, b, t1):
    problem, _ = catalog.make_problem("eikonal-disk")
    u = PiecewiseConstantControl([t1], [[np.cos(a), np.sin(a)], [np.cos(b), np.sin(b)]])
    gaps = dpp_gaps(problem, oracles.disk_value, [2.0, 1.0], u, [0.25, 0.5, 1.0], step=1e-2)
    gaps = gaps[np.isfinite(gaps)]
    assert np.all(gaps <= 1e-12)
