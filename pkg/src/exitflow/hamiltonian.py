"""Maximized Hamiltonians ``H(x, p) = max_u { -p.f(x,u) - L(x,u) }``.

Models evaluate on batched arrays and never raise inside the batched kernels;
the point-wise operations at the bottom of the module validate their inputs
and raise the documented errors.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import (CapabilityError, DegenerateCovectorError, InvalidInputError,
                     NonsmoothPointError)
from .problem import ControlProblem

COVECTOR_TOL = 1e-9
KINK_TOL = 1e-9
TIE_TOL = 1e-12
FD_STEP = 1e-5


def _mv(A, v):
    return np.einsum("...ij,...j->...i", A, v)


class HamiltonianModel:
    """Base class: value, argmax control, gradients and Hessian blocks.

    ``hessians`` returns ``(H_xx, H_xp, H_pp)`` with ``H_xp[i, j] =
    d2H / dx_i dp_j``.  The default implementation differentiates the
    analytic gradients by central differences.
    """

    kind = "analytic"
    smooth = True

    def __init__(self, problem: ControlProblem):
        self.problem = problem

    def value(self, x, p):
        raise NotImplementedError

    def argmax(self, x, p):
        raise NotImplementedError

    def gradients(self, x, p):
        """``(H_x, H_p)`` via the envelope formulas at the maximizing control."""
        prob = self.problem
        if prob.dynamics_dx is None or prob.running_cost_dx is None:
            raise CapabilityError("problem does not supply D_x f and L_x")
        u = self.argmax(x, p)
        Hp = -prob.dynamics(x, u)
        Hx = -np.einsum("...ji,...j->...i", prob.dynamics_dx(x, u), p) - prob.running_cost_dx(x, u)
        return Hx, Hp

    def grad_x(self, x, p):
        return self.gradients(x, p)[0]

    def grad_p(self, x, p):
        return self.gradients(x, p)[1]

    def hess_pp(self, x, p):
        return self.hessians(x, p)[2]

    def kink_distance(self, x, p):
        """Distance of ``p`` to the set where H is not differentiable."""
        return np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(p)[:-1]), np.inf)

    def hessians(self, x, p, step: float = FD_STEP):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        n = x.shape[-1]
        E = np.eye(n) * step
        # stack x-perturbations then p-perturbations in one batched call
        xs = np.concatenate([x[..., None, :] + E, x[..., None, :] - E,
                             np.repeat(x[..., None, :], 2 * n, axis=-2)], axis=-2)
        ps = np.concatenate([np.repeat(p[..., None, :], 2 * n, axis=-2),
                             p[..., None, :] + E, p[..., None, :] - E], axis=-2)
        gx, gp = self.gradients(xs, ps)
        Hxx = np.swapaxes((gx[..., :n, :] - gx[..., n:2 * n, :]) / (2 * step), -1, -2)
        Hxp = np.swapaxes((gx[..., 2 * n:3 * n, :] - gx[..., 3 * n:, :]) / (2 * step), -1, -2)
        Hpp = np.swapaxes((gp[..., 2 * n:3 * n, :] - gp[..., 3 * n:, :]) / (2 * step), -1, -2)
        return Hxx, Hxp, Hpp

    def argmax_set(self, x, p, tol: float = TIE_TOL) -> np.ndarray:
        """All sampled controls attaining ``H(x, p)`` within ``tol`` (single point)."""
        x = np.asarray(x, float)
        p = np.asarray(p, float)
        U = self.problem.control_sample
        xs = np.broadcast_to(x, (len(U), x.size))
        vals = -(self.problem.dynamics(xs, U) @ p) - self.problem.running_cost(xs, U)
        best = float(np.max(vals))
        return U[vals >= best - tol]


class SampledHamiltonian(HamiltonianModel):
    """Maximize over the problem's finite control sample.

    Ties within 1e-12 resolve to the first sample index.
    """

    kind = "sampled-argmax"
    smooth = False

    def __init__(self, problem: ControlProblem, controls: Optional[np.ndarray] = None):
        super().__init__(problem)
        self.controls = problem.control_sample if controls is None else np.asarray(controls, float)

    def _scores(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        U = self.controls
        xb = x[..., None, :]
        f = self.problem.dynamics(xb, U)
        return -np.einsum("...un,...n->...u", f, p) - self.problem.running_cost(xb, U)

    def value(self, x, p):
        return np.max(self._scores(x, p), axis=-1)

    def argmax(self, x, p):
        s = self._scores(x, p)
        best = np.max(s, axis=-1, keepdims=True)
        idx = np.argmax(s >= best - TIE_TOL, axis=-1)
        return self.controls[idx]


class ControlAffineBallHamiltonian(HamiltonianModel):
    """``f = h(x) + sigma(x) u``, ``|u| <= R``, running cost ``L(x)`` only.

    ``H = -h.p + R |sigma^T p| - L(x)``; the maximizer is
    ``u* = -R sigma^T p / |sigma^T p|``.
    """

    def __init__(self, problem, drift, drift_dx, sigma, sigma_dx, cost, cost_dx, radius=1.0,
                 state_free: bool = False):
        super().__init__(problem)
        self.drift, self.drift_dx = drift, drift_dx
        self.sigma, self.sigma_dx = sigma, sigma_dx
        self.cost, self.cost_dx = cost, cost_dx
        self.radius = float(radius)
        # h, sigma and L constant in x: H_x, H_xx and H_xp vanish identically
        self.state_free = bool(state_free)

    def _s(self, x, p):
        sig = self.sigma(x)
        s = np.einsum("...ji,...j->...i", sig, p)
        return sig, s, np.linalg.norm(s, axis=-1)

    def value(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        _, _, ns = self._s(x, p)
        return -np.sum(self.drift(x) * p, -1) + self.radius * ns - self.cost(x)

    def argmax(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        _, s, ns = self._s(x, p)
        return -self.radius * s / np.where(ns > 0, ns, 1.0)[..., None]

    def kink_distance(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        return self._s(x, p)[2]

    def gradients(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        sig, s, ns = self._s(x, p)
        unit = s / np.where(ns > 0, ns, 1.0)[..., None]
        Hp = -self.drift(x) + self.radius * _mv(sig, unit)
        if self.state_free:
            return np.zeros_like(x), Hp
        Hx = -np.einsum("...ji,...j->...i", self.drift_dx(x), p) - self.cost_dx(x)
        if self.sigma_dx is not None:
            # d|s|/dx_k = unit_j p_i dsigma_ij/dx_k
            Hx = Hx + self.radius * np.einsum("...i,...j,...ijk->...k", p, unit, self.sigma_dx(x))
        return Hx, Hp

    def hessians(self, x, p, step: float = FD_STEP):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        if self.state_free:
            Hxx = np.zeros(x.shape + (x.shape[-1],))
            Hxp = Hxx.copy()
        else:
            Hxx, Hxp, _ = super().hessians(x, p, step)
        sig, s, ns = self._s(x, p)
        ns = np.where(ns > 0, ns, 1.0)
        ss = _mv(sig, s)
        Hpp = self.radius * (sig @ np.swapaxes(sig, -1, -2) / ns[..., None, None]
                             - ss[..., :, None] * ss[..., None, :] / ns[..., None, None] ** 3)
        return Hxx, Hxp, Hpp


class QuadraticCostBallHamiltonian(HamiltonianModel):
    """``f = h(x) + sigma(x) u``, ``|u| <= R``, ``L = l(x) + |u|^2 / 2``.

    Quadratic regime ``|sigma^T p| <= R``: ``u* = -sigma^T p`` and
    ``H = -h.p - l + |sigma^T p|^2 / 2``; otherwise the control saturates and
    ``H = -h.p - l + R |sigma^T p| - R^2 / 2``.
    """

    def __init__(self, problem, drift, drift_dx, sigma, sigma_dx, ell, ell_dx, radius=10.0):
        super().__init__(problem)
        self.drift, self.drift_dx = drift, drift_dx
        self.sigma, self.sigma_dx = sigma, sigma_dx
        self.ell, self.ell_dx = ell, ell_dx
        self.radius = float(radius)

    def _parts(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        sig = self.sigma(x)
        s = np.einsum("...ji,...j->...i", sig, p)
        ns = np.linalg.norm(s, axis=-1)
        return x, p, sig, s, ns, ns <= self.radius

    def value(self, x, p):
        x, p, _, _, ns, inner = self._parts(x, p)
        R = self.radius
        base = -np.sum(self.drift(x) * p, -1) - self.ell(x)
        return base + np.where(inner, 0.5 * ns ** 2, R * ns - 0.5 * R ** 2)

    def argmax(self, x, p):
        x, p, _, s, ns, inner = self._parts(x, p)
        scale = np.where(inner, 1.0, self.radius / np.where(ns > 0, ns, 1.0))
        return -scale[..., None] * s

    def gradients(self, x, p):
        x, p, sig, s, ns, inner = self._parts(x, p)
        # w = d(s-part)/ds: s in the quadratic regime, R s/|s| when saturated
        w = np.where(inner[..., None], s, self.radius * s / np.where(ns > 0, ns, 1.0)[..., None])
        Hp = -self.drift(x) + _mv(sig, w)
        Hx = -np.einsum("...ji,...j->...i", self.drift_dx(x), p) - self.ell_dx(x)
        if self.sigma_dx is not None:
            Hx = Hx + np.einsum("...i,...j,...ijk->...k", p, w, self.sigma_dx(x))
        return Hx, Hp

    def hessians(self, x, p, step: float = FD_STEP):
        Hxx, Hxp, _ = super().hessians(x, p, step)
        x, p, sig, s, ns, inner = self._parts(x, p)
        sst = sig @ np.swapaxes(sig, -1, -2)
        nsafe = np.where(ns > 0, ns, 1.0)[..., None, None]
        ss = _mv(sig, s)
        sat = self.radius * (sst / nsafe - ss[..., :, None] * ss[..., None, :] / nsafe ** 3)
        Hpp = np.where(inner[..., None, None], sst, sat)
        return Hxx, Hxp, Hpp


class AbsSumHamiltonian(HamiltonianModel):
    """Minimum time with box controls on some axes: ``H = sum_i |p_i| - 1``.

    Dynamics ``x_i' = u_i`` for ``i`` in ``axes`` (``|u_i| <= 1``) and zero on
    the remaining axes; ``L = 1``.  Not differentiable where some ``p_i = 0``.
    """

    smooth = False

    def __init__(self, problem, axes=(0,)):
        super().__init__(problem)
        self.axes = tuple(axes)

    def value(self, x, p):
        p = np.asarray(p, float)
        x = np.asarray(x, float)
        v = np.sum(np.abs(p[..., list(self.axes)]), -1) - 1.0
        return np.broadcast_to(v, np.broadcast_shapes(x.shape[:-1], p.shape[:-1]))

    def argmax(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        q = p[..., list(self.axes)]
        # ties (p_i = 0) resolve to -1, the first control of the sample
        return np.where(q > 0, -1.0, np.where(q < 0, 1.0, -1.0))

    def kink_distance(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        return np.min(np.abs(p[..., list(self.axes)]), axis=-1)

    def gradients(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        Hp = np.zeros_like(p)
        Hp[..., list(self.axes)] = np.sign(p[..., list(self.axes)])
        return np.zeros_like(x), Hp

    def hessians(self, x, p, step: float = FD_STEP):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        z = np.zeros(x.shape + (x.shape[-1],))
        return z, z.copy(), z.copy()


class SelectedControlHamiltonian(HamiltonianModel):
    """``H_u(x, p) = -p.f(x, u) - L(x, u)`` for one fixed control ``u``.

    Drives characteristics from seeds whose covector sits on a kink of the
    true Hamiltonian, one selection from the argmax set at a time.
    """

    def __init__(self, problem, control):
        super().__init__(problem)
        self.control = np.asarray(control, float)

    def _u(self, x):
        return np.broadcast_to(self.control, np.shape(x)[:-1] + self.control.shape)

    def value(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        u = self._u(x)
        return -np.sum(self.problem.dynamics(x, u) * p, -1) - self.problem.running_cost(x, u)

    def argmax(self, x, p):
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        return np.array(self._u(x))

    def hessians(self, x, p, step: float = FD_STEP):
        Hxx, Hxp, _ = super().hessians(x, p, step)
        return Hxx, Hxp, np.zeros_like(Hxx)


# ---------------------------------------------------------------------------
# point-wise operations

def _point(v, name):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise InvalidInputError(f"{name} must be a 1-D vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return v


def eval_hamiltonian(model: HamiltonianModel, x, p) -> float:
    x, p = _point(x, "x"), _point(p, "p")
    return float(model.value(x, p))


def argmax_control(model: HamiltonianModel, x, p) -> np.ndarray:
    x, p = _point(x, "x"), _point(p, "p")
    if np.linalg.norm(p) < COVECTOR_TOL:
        raise DegenerateCovectorError("argmax control needs p != 0")
    return np.asarray(model.argmax(x, p), dtype=float)


def hamiltonian_gradients(model: HamiltonianModel, x, p) -> tuple[np.ndarray, np.ndarray]:
    """``(H_x, H_p)`` at a point with ``p != 0`` away from kinks."""
    x, p = _point(x, "x"), _point(p, "p")
    if np.linalg.norm(p) < COVECTOR_TOL:
        raise DegenerateCovectorError("H is only differentiable for p != 0")
    if float(model.kink_distance(x, p)) < KINK_TOL:
        raise NonsmoothPointError(f"H is not differentiable at p={p}")
    Hx, Hp = model.gradients(x, p)
    return np.asarray(Hx, float), np.asarray(Hp, float)


def hamiltonian_hessians(model: HamiltonianModel, x, p):
    x, p = _point(x, "x"), _point(p, "p")
    if np.linalg.norm(p) < COVECTOR_TOL:
        raise DegenerateCovectorError("H is only differentiable for p != 0")
    if float(model.kink_distance(x, p)) < KINK_TOL:
        raise NonsmoothPointError(f"H is not differentiable at p={p}")
    return model.hessians(x, p)


def finite_difference_gradients(model: HamiltonianModel, x, p, step: float = FD_STEP):
    """Central differences of ``model.value``; independent of ``gradients``."""
    x, p = _point(x, "x"), _point(p, "p")
    E = np.eye(x.size) * step
    Hx = (model.value(x + E, p) - model.value(x - E, p)) / (2 * step)
    Hp = (model.value(x, p + E) - model.value(x, p - E)) / (2 * step)
    return np.asarray(Hx, float), np.asarray(Hp, float)


FlowModelFactory = Callable[[np.ndarray], HamiltonianModel]
