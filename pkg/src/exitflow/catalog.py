"""Built-in problem catalog.

Every entry builds a ``(ControlProblem, HamiltonianModel)`` pair from keyword
parameters and carries a provenance note plus a self-test of its closed-form
values.  ``ex1`` and ``ex2`` deliberately violate the smoothness hypotheses on
the Hamiltonian; they are flagged as hypothesis-violating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .hamiltonian import (AbsSumHamiltonian, ControlAffineBallHamiltonian, HamiltonianModel,
                          QuadraticCostBallHamiltonian, SampledHamiltonian)
from .problem import (Bounds, ControlProblem, RegularityFlags, box_controls, circle_controls,
                      disk_controls)
from .targets import Capsule, Disk, DiskComplement, PolygonComplement

EX1_VERTICES = [(1.0, 0.0), (4.0, -2.0), (7.0, 0.0), (4.0, 2.0)]


def _affine(drift, sigma):
    def f(x, u):
        x = np.asarray(x, float)
        return drift(x) + np.einsum("...ij,...j->...i", sigma(x), np.asarray(u, float))
    return f


def _affine_dx(drift_dx, sigma_dx):
    def df(x, u):
        x = np.asarray(x, float)
        out = drift_dx(x)
        if sigma_dx is not None:
            out = out + np.einsum("...ijk,...j->...ik", sigma_dx(x), np.asarray(u, float))
        return out
    return df


def _zeros_like_state(x):
    return np.zeros(np.shape(x)[:-1] + (2,))


def _const(value):
    def fn(x):
        return np.full(np.shape(x)[:-1], float(value))
    return fn


def _ball_projector(radius):
    def proj(u):
        u = np.asarray(u, float)
        r = np.linalg.norm(u, axis=-1, keepdims=True)
        return u * np.minimum(1.0, radius / np.where(r > 0, r, 1.0))
    return proj


def _eikonal(target, name, control_count=720, radius=1.0):
    n = 2
    drift = _zeros_like_state
    drift_dx = lambda x: np.zeros(np.shape(x)[:-1] + (n, n))
    sigma = lambda x: np.broadcast_to(np.eye(n), np.shape(x)[:-1] + (n, n))
    cost = _const(1.0)
    cost_dx = _zeros_like_state

    problem = ControlProblem(
        dim_state=n,
        dynamics=lambda x, u: np.broadcast_to(np.asarray(u, float),
                                              np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        running_cost=lambda x, u: np.ones(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])),
        terminal_cost=_const(0.0),
        terminal_grad=_zeros_like_state,
        # H is attained on the sphere when L does not depend on u
        control_sampler=lambda m: circle_controls(radius, m),
        target=target,
        control_count=control_count,
        dynamics_dx=lambda x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (n, n)),
        running_cost_dx=lambda x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (n,)),
        project_control=_ball_projector(radius),
        lipschitz=(0.0, 0.0),
        bounds=Bounds(radius, 1.0, 0.0, radius),
        flags=RegularityFlags(hamiltonian_c2=True, boundary_c2=True, data_order=3,
                              unique_smooth_argmax=True, hpp_kernel_dim_one=True,
                              state_only_cost=True),
        name=name,
    )
    model = ControlAffineBallHamiltonian(problem, drift, drift_dx, sigma, None, cost, cost_dx,
                                         radius=radius, state_free=True)
    return problem, model


def eikonal_disk(radius: float = 1.0, control_count: int = 720):
    """Minimum time to the unit disk with ``f = u``, ``|u| <= 1``: V = |x| - 1."""
    problem, model = _eikonal(Disk((0.0, 0.0), radius), "eikonal-disk", control_count)
    return _with_box(problem, (-3.0, 3.0)), model


def focus(radius: float = 1.0, control_count: int = 720):
    """Minimum time to leave the unit disk: V = 1 - |x|, characteristics focus at 0."""
    problem, model = _eikonal(DiskComplement((0.0, 0.0), radius), "focus", control_count)
    return _with_box(problem, (-radius, radius)), model


def _with_box(problem, box):
    from dataclasses import replace
    return replace(problem, sample_box=box)


def ex1(control_count: int = 9):
    """Minimum time with ``x1' = u``, ``|u| <= 1``, inside the rhombus D.

    ``T(y) = y1 - 3/2 |y2| - 1`` on the left half and ``-y1 - 3/2 |y2| + 7``
    on the right half; ``H = |p1| - 1`` is not differentiable at ``p1 = 0``.
    """
    target = PolygonComplement(EX1_VERTICES)

    def dyn(x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        v = np.zeros(shape + (2,))
        v[..., 0] = np.broadcast_to(u[..., 0], shape)
        return v

    shape2 = lambda x, u: np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
    problem = ControlProblem(
        dim_state=2, dynamics=dyn,
        running_cost=lambda x, u: np.ones(shape2(x, u)),
        terminal_cost=_const(0.0), terminal_grad=_zeros_like_state,
        control_sampler=lambda m: np.linspace(-1.0, 1.0, m)[:, None],
        target=target, control_count=control_count,
        dynamics_dx=lambda x, u: np.zeros(shape2(x, u) + (2, 2)),
        running_cost_dx=lambda x, u: np.zeros(shape2(x, u) + (2,)),
        project_control=lambda u: np.clip(u, -1.0, 1.0),
        sample_box=((1.0, -2.0), (7.0, 2.0)),
        bounds=Bounds(1.0, 1.0, 0.0, 2 / np.sqrt(13)),
        flags=RegularityFlags(data_order=0),
        name="ex1",
    )
    return problem, AbsSumHamiltonian(problem, axes=(0,))


def ex1_value(y):
    """Closed-form minimum time of ``ex1`` (valid inside the rhombus)."""
    y = np.asarray(y, float)
    left = y[..., 0] - 1.5 * np.abs(y[..., 1]) - 1.0
    right = -y[..., 0] - 1.5 * np.abs(y[..., 1]) + 7.0
    return np.minimum(left, right)


def ex2(control_count: int = 441):
    """Minimum time with ``f = u``, ``|u_i| <= 1``, to a capsule target.

    ``K`` is the set of points within 2 of the segment from (-2,-4) to (-2,4).
    ``H = |p1| + |p2| - 1``; at (1, 0) three constant controls are optimal.
    """
    target = Capsule((-2.0, -4.0), (-2.0, 4.0), 2.0)
    shape2 = lambda x, u: np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])

    def sampler(m):
        per = max(int(round(np.sqrt(m))), 2)
        return box_controls(2, per)

    problem = ControlProblem(
        dim_state=2,
        dynamics=lambda x, u: np.broadcast_to(np.asarray(u, float), shape2(x, u) + (2,)).copy(),
        running_cost=lambda x, u: np.ones(shape2(x, u)),
        terminal_cost=_const(0.0), terminal_grad=_zeros_like_state,
        control_sampler=sampler, target=target, control_count=control_count,
        dynamics_dx=lambda x, u: np.zeros(shape2(x, u) + (2, 2)),
        running_cost_dx=lambda x, u: np.zeros(shape2(x, u) + (2,)),
        project_control=lambda u: np.clip(u, -1.0, 1.0),
        sample_box=((-1.0, -3.0), (3.0, 3.0)),
        bounds=Bounds(np.sqrt(2), 1.0, 0.0, 1.0),
        flags=RegularityFlags(data_order=0),
        name="ex2",
    )
    return problem, AbsSumHamiltonian(problem, axes=(0, 1))


def ex3(radius: float = 10.0, control_count: int = 720, drift_scale: float = 0.2,
        sigma=((1.0, 0.0), (0.3, 0.8)), psi_slope: float = 0.05):
    """Control-affine system with quadratic control cost over a ball.

    ``f = h(x) + sigma u``, ``L = l(x) + |u|^2/2``, ``|u| <= R`` with a rotating
    drift ``h = c (-x2, x1) / (1 + |x|^2)`` and ``l = 1 + x2^2 / (2 (1 + x2^2))``.
    """
    S = np.asarray(sigma, float)

    def drift(x):
        x = np.asarray(x, float)
        s = drift_scale / (1.0 + np.sum(x * x, -1))
        return s[..., None] * np.stack([-x[..., 1], x[..., 0]], -1)

    def drift_dx(x):
        x = np.asarray(x, float)
        s = 1.0 / (1.0 + np.sum(x * x, -1))
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        Jx = np.stack([-x[..., 1], x[..., 0]], -1)
        return drift_scale * (s[..., None, None] * J
                              - 2 * (s ** 2)[..., None, None] * Jx[..., :, None] * x[..., None, :])

    sig = lambda x: np.broadcast_to(S, np.shape(x)[:-1] + (2, 2))

    def ell(x):
        x2 = np.asarray(x, float)[..., 1]
        return 1.0 + 0.5 * x2 ** 2 / (1.0 + x2 ** 2)

    def ell_dx(x):
        x2 = np.asarray(x, float)[..., 1]
        out = np.zeros(np.shape(x))
        out[..., 1] = x2 / (1.0 + x2 ** 2) ** 2
        return out

    def cost(x, u):
        return ell(x) + 0.5 * np.sum(np.asarray(u, float) ** 2, -1)

    def cost_dx(x, u):
        return np.broadcast_to(ell_dx(x), np.broadcast_shapes(np.shape(x), np.shape(u))).copy()

    smax = float(np.linalg.norm(S, 2))
    problem = ControlProblem(
        dim_state=2, dynamics=_affine(drift, sig), running_cost=cost,
        terminal_cost=lambda x: psi_slope * np.asarray(x, float)[..., 0],
        terminal_grad=lambda x: np.broadcast_to([psi_slope, 0.0], np.shape(x)).copy(),
        control_sampler=lambda m: disk_controls(radius, m), target=Disk((0.0, 0.0), 1.0),
        control_count=control_count,
        dynamics_dx=_affine_dx(drift_dx, None), running_cost_dx=cost_dx,
        project_control=_ball_projector(radius), sample_box=((-3.0, -3.0), (3.0, 3.0)),
        lipschitz=(drift_scale * 1.0, drift_scale * 3.0),
        bounds=Bounds(drift_scale + smax * radius, 1.0, psi_slope,
                      float(np.linalg.svd(S, compute_uv=False)[-1]) * radius - drift_scale),
        # H is C^{1,1}: H_pp jumps on the saturation sphere |sigma^T p| = R
        flags=RegularityFlags(hamiltonian_c2=False, boundary_c2=True, data_order=2,
                              unique_smooth_argmax=True, hpp_positive=True),
        name="ex3",
    )
    model = QuadraticCostBallHamiltonian(problem, drift, drift_dx, sig, None, ell, ell_dx,
                                         radius=radius)
    return problem, model


def ex4(radius: float = 1.0, control_count: int = 720, drift_scale: float = 0.3,
        coupling: float = 0.2, psi_slope: float = 0.1):
    """Control-affine system, ball controls, state-only cost.

    ``f = h(x) + sigma(x) u`` with ``h = c (sin x2, cos x1)``,
    ``sigma = [[1, k sin x2], [0, 1]]``, ``L = 1 + x1^2 / (4 (1 + x1^2))``.
    ``H_pp`` has a one-dimensional kernel spanned by ``p``.
    """

    def drift(x):
        x = np.asarray(x, float)
        return drift_scale * np.stack([np.sin(x[..., 1]), np.cos(x[..., 0])], -1)

    def drift_dx(x):
        x = np.asarray(x, float)
        out = np.zeros(np.shape(x) + (2,))
        out[..., 0, 1] = drift_scale * np.cos(x[..., 1])
        out[..., 1, 0] = -drift_scale * np.sin(x[..., 0])
        return out

    def sig(x):
        x = np.asarray(x, float)
        out = np.zeros(np.shape(x) + (2,))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        out[..., 0, 1] = coupling * np.sin(x[..., 1])
        return out

    def sig_dx(x):
        x = np.asarray(x, float)
        out = np.zeros(np.shape(x) + (2, 2))
        out[..., 0, 1, 1] = coupling * np.cos(x[..., 1])
        return out

    def ell(x):
        x1 = np.asarray(x, float)[..., 0]
        return 1.0 + 0.25 * x1 ** 2 / (1.0 + x1 ** 2)

    def ell_dx(x):
        x1 = np.asarray(x, float)[..., 0]
        out = np.zeros(np.shape(x))
        out[..., 0] = 0.5 * x1 / (1.0 + x1 ** 2) ** 2
        return out

    problem = ControlProblem(
        dim_state=2, dynamics=_affine(drift, sig),
        running_cost=lambda x, u: np.broadcast_to(
            ell(x), np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])).copy(),
        terminal_cost=lambda x: psi_slope * np.asarray(x, float)[..., 1],
        terminal_grad=lambda x: np.broadcast_to([0.0, psi_slope], np.shape(x)).copy(),
        control_sampler=lambda m: circle_controls(radius, m), target=Disk((0.0, 0.0), 1.0),
        control_count=control_count,
        dynamics_dx=_affine_dx(drift_dx, sig_dx),
        running_cost_dx=lambda x, u: np.broadcast_to(
            ell_dx(x), np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        project_control=_ball_projector(radius), sample_box=((-3.0, -3.0), (3.0, 3.0)),
        lipschitz=(drift_scale + coupling * radius, drift_scale + coupling * radius),
        bounds=Bounds(drift_scale * np.sqrt(2) + radius * (1 + coupling), 1.0, psi_slope,
                      radius * (1 - coupling) - drift_scale * np.sqrt(2)),
        flags=RegularityFlags(hamiltonian_c2=True, boundary_c2=True, data_order=2,
                              unique_smooth_argmax=True, hpp_kernel_dim_one=True,
                              state_only_cost=True),
        name="ex4",
    )
    model = ControlAffineBallHamiltonian(problem, drift, drift_dx, sig, sig_dx, ell, ell_dx,
                                         radius=radius)
    return problem, model


def saddle(target_radius: float = 0.5, control_count: int = 720):
    """Linear saddle ``f = M x + u`` with ``M = diag(1, -1)``, ``|u| <= 1``, ``L = 1``.

    From the seed (r, 0): ``q(t) = (2 e^t, 0)`` and ``y1(t) = 1 - (1 - r) e^{-t}``
    (for r = 0.5), a non-polynomial characteristic used for RK4 order checks.
    """
    M = np.diag([1.0, -1.0])
    drift = lambda x: np.asarray(x, float) @ M.T
    drift_dx = lambda x: np.broadcast_to(M, np.shape(x) + (2,)).copy()
    sig = lambda x: np.broadcast_to(np.eye(2), np.shape(x) + (2,))
    shape2 = lambda x, u: np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
    problem = ControlProblem(
        dim_state=2, dynamics=_affine(drift, sig),
        running_cost=lambda x, u: np.ones(shape2(x, u)),
        terminal_cost=_const(0.0), terminal_grad=_zeros_like_state,
        control_sampler=lambda m: circle_controls(1.0, m), target=Disk((0.0, 0.0), target_radius),
        control_count=control_count,
        dynamics_dx=lambda x, u: np.broadcast_to(M, shape2(x, u) + (2, 2)).copy(),
        running_cost_dx=lambda x, u: np.zeros(shape2(x, u) + (2,)),
        project_control=_ball_projector(1.0), sample_box=((-0.9, -0.9), (0.9, 0.9)),
        lipschitz=(1.0, 0.0),
        flags=RegularityFlags(hamiltonian_c2=True, boundary_c2=True, data_order=3,
                              unique_smooth_argmax=True, hpp_kernel_dim_one=True,
                              state_only_cost=True),
        name="saddle",
    )
    cost = _const(1.0)
    model = ControlAffineBallHamiltonian(problem, drift, drift_dx, sig, None, cost,
                                         _zeros_like_state, radius=1.0)
    return problem, model


# ---------------------------------------------------------------------------
# self-tests of closed-form values

def _check(name, got, want, tol):
    got = np.asarray(got, float)
    ok = bool(np.all(np.abs(got - np.asarray(want, float)) <= tol))
    return {"check": name, "got": got.tolist(), "want": np.asarray(want, float).tolist(), "ok": ok}


def _selftest_eikonal_disk():
    from .hamiltonian import argmax_control, eval_hamiltonian
    from .terminal import solve_mu
    _, m = eikonal_disk()
    return [
        _check("H(x, 0) = -1", eval_hamiltonian(m, [2.0, 0.0], [0.0, 0.0]), -1.0, 1e-12),
        _check("u*(p=(0,2)) = (0,-1)", argmax_control(m, [2.0, 0.0], [0.0, 2.0]), [0.0, -1.0], 1e-12),
        _check("mu = 1", solve_mu(m, [1.0, 0.0]).mu, 1.0, 1e-10),
    ]


def _selftest_focus():
    from .terminal import solve_mu
    _, m = focus()
    tc = solve_mu(m, [1.0, 0.0])
    return [_check("phi(1,0) = (-1,0)", tc.phi, [-1.0, 0.0], 1e-10)]


def _selftest_ex1():
    from .hamiltonian import eval_hamiltonian
    from .terminal import solve_mu
    _, m = ex1()
    z = np.array([2.5, 1.0])
    tc = solve_mu(m, [2.5, -1.0])  # lower-left face 2 y1 + 3 y2 = 2
    return [
        _check("H = |p1| - 1 at p=(2,0)", eval_hamiltonian(m, z, [2.0, 0.0]), 1.0, 1e-12),
        _check("mu = sqrt(13)/2", tc.mu, np.sqrt(13) / 2, 1e-10),
        _check("T(3, 0) = 2", ex1_value([3.0, 0.0]), 2.0, 1e-12),
        _check("T(5, 0) = 2", ex1_value([5.0, 0.0]), 2.0, 1e-12),
    ]


def _selftest_ex2():
    _, m = ex2()
    u = np.array([[-1.0, 0.0], [-1.0, 1.0], [-1.0, -1.0]])
    # each of the three constant controls reaches x1 = 0 from (1, 0) at t = 1
    ends = np.array([1.0, 0.0]) + u
    b = m.problem.target.oriented_distance(ends)
    return [
        _check("H = |p1| + |p2| - 1 at p=(1,1)", m.value(np.zeros(2), np.ones(2)), 1.0, 1e-12),
        _check("three controls hit bdry K at t = 1", b, np.zeros(3), 1e-12),
    ]


def _selftest_ex3():
    from .hamiltonian import eval_hamiltonian
    _, m = ex3(drift_scale=0.0, sigma=((1.0, 0.0), (0.0, 1.0)))
    m.ell = lambda x: np.ones(np.shape(x)[:-1])
    return [
        _check("H(p=(1,1)) = 0 with h=0, sigma=I, l=1", eval_hamiltonian(m, [2.0, 0.5], [1.0, 1.0]), 0.0, 1e-12),
        _check("u*(p=(1,0)) = (-1,0)", m.argmax(np.zeros(2), np.array([1.0, 0.0])), [-1.0, 0.0], 1e-12),
    ]


def _selftest_ex4():
    _, m = ex4()
    x = np.array([0.7, -1.3])
    pv = np.array([0.4, -0.9])
    _, Hp = m.gradients(x, pv)
    sg = m.sigma(x)
    s = sg.T @ pv
    want = -m.drift(x) + sg @ s / np.linalg.norm(s)
    Hpp = m.hessians(x, pv)[2]
    sv = np.linalg.svd(Hpp, compute_uv=False)
    return [
        _check("H_p = -h + sigma sigma^T p / |sigma^T p|", Hp, want, 1e-12),
        _check("dim ker H_pp = 1", int(np.sum(sv < 1e-10 * sv[0])), 1, 0),
    ]


def _selftest_saddle():
    from .terminal import solve_mu
    _, m = saddle()
    return [_check("mu(0.5, 0) = 2", solve_mu(m, [0.5, 0.0]).mu, 2.0, 1e-10)]


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    build: Callable[..., tuple]
    provenance: str
    hypothesis_violating: bool = False
    box: tuple = ((-3.0, -3.0), (3.0, 3.0))
    horizon: float = 3.0
    fan: int = 0
    self_test: Callable[[], list] = field(default=lambda: [])

    def make(self, **params) -> tuple[ControlProblem, HamiltonianModel]:
        try:
            return self.build(**params)
        except TypeError as exc:
            raise InvalidInputError(f"bad parameters for {self.id}: {exc}") from None


CATALOG = {
    e.id: e for e in [
        CatalogEntry("eikonal-disk", eikonal_disk,
                     "eikonal instance of the control-affine ball family (h=0, sigma=I, L=1); "
                     "unit-disk target, V = |x| - 1",
                     box=((-3.0, -3.0), (3.0, 3.0)), horizon=3.0, self_test=_selftest_eikonal_disk),
        CatalogEntry("focus", focus,
                     "eikonal instance with target the complement of the unit disk; "
                     "V = 1 - |x|, all characteristics meet at the origin at t = 1",
                     box=((-1.2, -1.2), (1.2, 1.2)), horizon=1.5, self_test=_selftest_focus),
        CatalogEntry("ex1", ex1,
                     "minimum time in a rhombus with x1' = u; value y1 - 3/2|y2| - 1 on the left, "
                     "-y1 - 3/2|y2| + 7 on the right; nondifferentiable on y2 = 0",
                     hypothesis_violating=True, box=((0.5, -2.5), (7.5, 2.5)), horizon=7.0,
                     self_test=_selftest_ex1),
        CatalogEntry("ex2", ex2,
                     "minimum time with box controls to a capsule; V(1,0) = 1 with several "
                     "optimal trajectories",
                     hypothesis_violating=True, box=((-1.0, -3.0), (3.0, 3.0)), horizon=3.0, fan=5,
                     self_test=_selftest_ex2),
        CatalogEntry("ex3", ex3,
                     "control-affine dynamics with quadratic control cost over a ball of radius 10",
                     box=((-3.0, -3.0), (3.0, 3.0)), horizon=2.0, self_test=_selftest_ex3),
        CatalogEntry("ex4", ex4,
                     "control-affine dynamics, ball controls, state-only cost; dim ker H_pp = 1",
                     box=((-3.0, -3.0), (3.0, 3.0)), horizon=2.0, self_test=_selftest_ex4),
        CatalogEntry("saddle", saddle,
                     "linear saddle x' = diag(1,-1) x + u to a disk of radius 1/2; "
                     "closed-form exponential characteristics",
                     box=((-0.9, -0.9), (0.9, 0.9)), horizon=2.0, self_test=_selftest_saddle),
    ]
}

SMOOTH_PROBLEMS = ("eikonal-disk", "focus", "ex3", "ex4", "saddle")


def get(problem_id: str) -> CatalogEntry:
    try:
        return CATALOG[problem_id]
    except KeyError:
        raise InvalidInputError(f"unknown problem '{problem_id}'; "
                                f"known: {', '.join(sorted(CATALOG))}") from None


def make_problem(problem_id: str, **params) -> tuple[ControlProblem, HamiltonianModel]:
    return get(problem_id).make(**params)


def sampled_model(problem: ControlProblem) -> SampledHamiltonian:
    return SampledHamiltonian(problem)
