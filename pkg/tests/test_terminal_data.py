"""Targets, boundary charts, terminal covectors and seed initialization."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exitflow import catalog
from exitflow.errors import (BracketFailureError, CompatibilityWarning, DegenerateSeedError,
                             InvalidInputError, NonsmoothPointError, OutOfChartError)
from exitflow.targets import (Capsule, Disk, DiskComplement, PolygonComplement, boundary_seeds,
                              chart_point, oriented_distance, segment_chart)
from exitflow.terminal import (MU_TOL, covector_jacobian, seed_variational_init, solve_mu,
                               terminal_covector_field)

import oracles

angle = st.floats(0.0, 2 * np.pi, allow_nan=False)


# ---------------------------------------------------------------------------
# oriented distance

def test_disk_oriented_distance():
    b, g = oriented_distance(Disk(), [3.0, 4.0])
    assert b == pytest.approx(4.0, abs=1e-15)
    np.testing.assert_allclose(g, [0.6, 0.8], atol=1e-15)
    assert oriented_distance(Disk(), [0.5, 0.0], with_gradient=False) == pytest.approx(-0.5)


def test_disk_complement_flips_sign():
    b, g = oriented_distance(DiskComplement(), [0.5, 0.0])
    assert b == pytest.approx(0.5)
    np.testing.assert_allclose(g, [-1.0, 0.0], atol=1e-15)


def test_polygon_complement_distance(ex1):
    problem, _ = ex1
    b, g = oriented_distance(problem.target, [3.0, 1.0])
    assert b == pytest.approx(oracles.polygon_boundary_distance([3.0, 1.0]), abs=1e-14)
    np.testing.assert_allclose(g, np.array([2.0, -3.0]) / oracles.SQRT13, atol=1e-14)


def test_polygon_outside_is_negative(ex1):
    problem, _ = ex1
    b = oriented_distance(problem.target, [0.0, 0.0], with_gradient=False)
    assert b == pytest.approx(-1.0, abs=1e-14)


def test_capsule_distance_matches_oracle(rng):
    cap = Capsule((-2.0, -4.0), (-2.0, 4.0), 2.0)
    x = rng.uniform(-6, 4, (200, 2))
    np.testing.assert_allclose(cap.oriented_distance(x), oracles.capsule_distance(x), atol=1e-13)


@pytest.mark.parametrize("x", [[0.0, 0.0], [3.0, 0.0]])
def test_skeleton_has_no_gradient(x):
    target = Disk() if x == [0.0, 0.0] else PolygonComplement(oracles.EX1_VERTICES)
    with pytest.raises(NonsmoothPointError):
        oriented_distance(target, x)


def test_corner_has_no_gradient(ex1):
    with pytest.raises(NonsmoothPointError):
        oriented_distance(ex1[0].target, [4.0, 2.0])


def test_non_finite_point_rejected():
    with pytest.raises(InvalidInputError):
        oriented_distance(Disk(), [np.nan, 0.0])


@given(x=st.tuples(st.floats(-5, 5), st.floats(-5, 5)).map(np.array))
def test_distance_gradient_is_unit(x):
    for target in (Disk(), Capsule((-2.0, -4.0), (-2.0, 4.0), 2.0)):
        g, ok = target.distance_gradient(x)
        if ok:
            assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-12)


@given(eta=angle, s=st.floats(1e-3, 0.5))
def test_oriented_distance_changes_sign_across_boundary(eta, s):
    chart = Disk().charts()[0]
    z, _ = chart_point(chart, [eta])
    target = Disk()
    assert target.oriented_distance(z + s * z) > 0
    assert target.oriented_distance(z - s * z) < 0


# ---------------------------------------------------------------------------
# charts and seeds

def test_circle_chart_point(disk):
    chart = disk[0].target.charts()[0]
    z, t = chart_point(chart, [np.pi / 2])
    np.testing.assert_allclose(z, [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(t[:, 0], [-1.0, 0.0], atol=1e-15)


def test_segment_chart_is_arclength():
    chart = segment_chart([1.0, 0.0], [4.0, 2.0])
    assert chart.length() == pytest.approx(oracles.SQRT13, abs=1e-12)
    z, t = chart_point(chart, [oracles.SQRT13 / 2])
    np.testing.assert_allclose(z, [2.5, 1.0], atol=1e-14)
    assert np.linalg.norm(t[:, 0]) == pytest.approx(1.0)


def test_chart_point_out_of_domain(disk):
    chart = disk[0].target.charts()[0]
    with pytest.raises(OutOfChartError):
        chart_point(chart, [7.0])
    with pytest.raises(InvalidInputError):
        chart_point(chart, [0.0, 1.0])


def test_seeds_avoid_polygon_corners(ex1):
    layout = boundary_seeds(ex1[0].target, 16)
    assert len(layout) == 16
    assert np.bincount(layout.chart_index).tolist() == [4, 4, 4, 4]
    assert np.all(layout.eta > 0) and np.all(layout.eta < oracles.SQRT13)


def test_seed_count_must_be_positive(disk):
    with pytest.raises(InvalidInputError):
        boundary_seeds(disk[0].target, 0)


# ---------------------------------------------------------------------------
# terminal covector

def test_mu_on_eikonal_disk(disk):
    tc = solve_mu(disk[1], np.array([1.0, 0.0]))
    assert tc.mu == pytest.approx(1.0, abs=MU_TOL)
    np.testing.assert_allclose(tc.phi, [1.0, 0.0], atol=1e-10)


def test_mu_with_quadratic_control_cost():
    # -1 + mu^2 / 2 = 0
    _, m = catalog.ex3(drift_scale=0.0, sigma=((1.0, 0.0), (0.0, 1.0)), psi_slope=0.0)
    tc = solve_mu(m, np.array([1.0, 0.0]))
    assert tc.mu == pytest.approx(np.sqrt(2.0), abs=1e-10)


@pytest.mark.parametrize("z,phi", [([2.5, 1.0], [1.0, -1.5]), ([2.5, -1.0], [1.0, 1.5]),
                                   ([5.5, 1.0], [-1.0, -1.5])])
def test_mu_on_rhombus_faces(ex1, z, phi):
    tc = solve_mu(ex1[1], np.array(z))
    assert tc.mu == pytest.approx(oracles.SQRT13 / 2, abs=1e-10)
    np.testing.assert_allclose(tc.phi, phi, atol=1e-10)


def test_mu_on_capsule_cap(quiet):
    _, m = catalog.make_problem("ex2")
    z = np.array([-2.0, 4.0]) + 2.0 * np.array([1.0, 1.0]) / np.sqrt(2)
    tc = solve_mu(m, z)
    assert tc.mu == pytest.approx(1 / np.sqrt(2), abs=1e-10)
    np.testing.assert_allclose(tc.phi, [0.5, 0.5], atol=1e-10)


def test_mu_rejects_points_off_boundary(disk):
    with pytest.raises(InvalidInputError):
        solve_mu(disk[1], np.array([1.5, 0.0]))


def test_mu_rejects_corner(ex1):
    with pytest.raises(NonsmoothPointError):
        solve_mu(ex1[1], np.array([4.0, 2.0]))


def test_incompatible_terminal_cost(disk):
    from dataclasses import replace
    problem, model = disk
    steep = replace(problem, terminal_grad=lambda x: np.broadcast_to([2.0, 0.0], np.shape(x)).copy())
    model = type(model).__new__(type(model))
    model.__dict__.update(disk[1].__dict__)
    model.problem = steep
    with pytest.warns(CompatibilityWarning), pytest.raises(BracketFailureError):
        solve_mu(model, np.array([0.0, 1.0]))


@given(eta=angle)
def test_covector_solves_hamiltonian(eta):
    problem, model = catalog.make_problem("ex4")
    z = np.array([np.cos(eta), np.sin(eta)])
    tc = solve_mu(model, z)
    assert tc.mu > 0
    assert abs(model.value(z, tc.phi)) <= 1e-10


def test_mu_is_continuous_along_boundary():
    _, model = catalog.make_problem("ex4")
    eta = np.linspace(0, 2 * np.pi, 721)
    mus = np.array([solve_mu(model, np.array([np.cos(e), np.sin(e)])).mu for e in eta])
    assert np.max(np.abs(np.diff(mus))) < 0.02


def test_covector_field_matches_exact_extension(disk):
    # off the boundary the extension is x / |x| for the eikonal disk
    x = np.array([[2.0, 1.0], [0.3, -0.4]])
    phi, mu = terminal_covector_field(disk[1], x)
    np.testing.assert_allclose(phi, x / np.linalg.norm(x, axis=-1, keepdims=True), atol=1e-10)
    J = covector_jacobian(disk[1], np.array([1.0, 0.0]))
    np.testing.assert_allclose(J, [[0.0, 0.0], [0.0, 1.0]], atol=1e-8)


# ---------------------------------------------------------------------------
# variational seed

def test_seed_init_on_disk(disk):
    chart = disk[0].target.charts()[0]
    A, B = seed_variational_init(disk[1], chart, [0.0])
    np.testing.assert_allclose(A, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(B, [[0.0, 0.0], [0.0, 1.0]], atol=1e-8)


def test_seed_init_on_focus(focus):
    chart = focus[0].target.charts()[0]
    A, B = seed_variational_init(focus[1], chart, [0.0])
    _, _, Y, Q = oracles.radial_characteristic(0.0, 0.0, outward=False)
    np.testing.assert_allclose(A, Y, atol=1e-12)
    np.testing.assert_allclose(B, Q, atol=1e-8)


def test_seed_init_on_rhombus_face(ex1):
    chart = ex1[0].target.charts()[0]
    A, B = seed_variational_init(ex1[1], chart, [0.5])
    np.testing.assert_allclose(A, [[1.0, 3 / oracles.SQRT13], [0.0, -2 / oracles.SQRT13]], atol=1e-12)
    np.testing.assert_allclose(B, 0.0, atol=1e-8)


def test_seed_init_on_kink(quiet):
    problem, model = catalog.make_problem("ex2")
    side = [c for c in problem.target.charts() if c.label == "side+"][0]
    with pytest.raises(NonsmoothPointError):
        seed_variational_init(model, side, [4.0])


def test_seed_init_tangent_velocity_is_degenerate(disk):
    """A velocity tangent to the boundary makes det A vanish."""
    class Tangential(type(disk[1])):
        def gradients(self, x, p):
            Hx, Hp = super().gradients(x, p)
            return Hx, np.stack([-Hp[..., 1], Hp[..., 0]], -1)
    flow = Tangential.__new__(Tangential)
    flow.__dict__.update(disk[1].__dict__)
    chart = disk[0].target.charts()[0]
    with pytest.raises(DegenerateSeedError):
        seed_variational_init(disk[1], chart, [0.0], flow=flow)


@given(eta=angle)
def test_seed_pair_has_full_rank(eta):
    problem, model = catalog.make_problem("ex4")
    chart = problem.target.charts()[0]
    A, B = seed_variational_init(model, chart, [eta])
    s = np.linalg.svd(np.vstack([A, B]), compute_uv=False)
    assert s[-1] > 1e-3
