"""Terminal covector ``phi(z) = grad psi(z) + mu(z) n_z`` and seed Jacobians."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (BracketFailureError, CompatibilityWarning, DegenerateSeedError,
                     InvalidInputError, NonsmoothPointError)
from .hamiltonian import HamiltonianModel
from .targets import BoundaryChart, chart_point

ON_BOUNDARY_TOL = 1e-9
MU_TOL = 1e-10
MAX_DOUBLINGS = 60
MAX_BISECTIONS = 200
FD_STEP = 1e-5
DET_TOL = 1e-10


@dataclass(frozen=True)
class TerminalCovector:
    z: np.ndarray
    mu: float
    phi: np.ndarray
    residual: float = 0.0


def solve_mu_batch(model: HamiltonianModel, z, grad_psi, normal, *, warn: bool = True):
    """Root ``mu > 0`` of ``H(z, g + mu n) = 0`` for a batch of boundary points.

    Bracket by doubling ``mu_hi`` from 1, then bisect every element in
    lock-step until the bracket cannot shrink further.
    """
    z = np.asarray(z, float)
    g = np.asarray(grad_psi, float)
    n = np.asarray(normal, float)

    def H(mu):
        return np.asarray(model.value(z, g + mu[..., None] * n), float)

    shape = z.shape[:-1]
    h0 = H(np.zeros(shape))
    if np.any(h0 >= 0):
        if warn:
            warnings.warn("H(z, grad psi(z)) >= 0: terminal cost violates the "
                          "compatibility condition", CompatibilityWarning, stacklevel=3)
        if np.any(h0 > MU_TOL):
            raise BracketFailureError("no positive root: H(z, grad psi(z)) > 0")

    hi = np.ones(shape)
    for _ in range(MAX_DOUBLINGS):
        need = H(hi) <= 0
        if not np.any(need):
            break
        hi = np.where(need, 2 * hi, hi)
    else:
        if np.any(H(hi) <= 0):
            raise BracketFailureError(f"no sign change of H up to mu={hi.max():.3g}")

    lo = np.zeros(shape)
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        pos = H(mid) > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * hi):
            break
    # pick whichever bracket end has the smaller residual
    hl, hh = np.abs(H(lo)), np.abs(H(hi))
    mu = np.where(hl < hh, lo, hi)
    return mu, np.minimum(hl, hh)


def solve_mu(model: HamiltonianModel, z) -> TerminalCovector:
    """Terminal covector at a boundary point ``z`` of the model's target."""
    problem = model.problem
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or not np.all(np.isfinite(z)):
        raise InvalidInputError("z must be a finite point")
    b = float(problem.target.oriented_distance(z))
    if abs(b) > ON_BOUNDARY_TOL:
        raise InvalidInputError(f"z is not on the target boundary (b_K={b:.3g})")
    nrm, ok = problem.target.distance_gradient(z)
    if not np.all(ok):
        raise NonsmoothPointError(f"no boundary normal at corner {z}")
    g = np.asarray(problem.terminal_grad(z), float)
    mu, res = solve_mu_batch(model, z, g, nrm)
    mu = float(mu)
    return TerminalCovector(z, mu, g + mu * nrm, float(res))


def terminal_covector_field(model: HamiltonianModel, x, warn: bool = False):
    """Off-boundary extension ``grad psi(x) + mu(x) grad b_K(x)`` (batched).

    On the boundary this is the terminal covector; nearby it is a smooth
    extension used to differentiate ``phi``.
    """
    problem = model.problem
    x = np.asarray(x, float)
    nrm, _ = problem.target.distance_gradient(x)
    g = np.asarray(problem.terminal_grad(x), float)
    mu, _ = solve_mu_batch(model, x, np.broadcast_to(g, x.shape), nrm, warn=warn)
    return g + mu[..., None] * nrm, mu


def covector_jacobian(model: HamiltonianModel, z, step: float = FD_STEP):
    """Central-difference Jacobian ``D phi(z)`` of the extended covector field."""
    z = np.asarray(z, float)
    n = z.shape[-1]
    E = np.eye(n) * step
    plus, _ = terminal_covector_field(model, z[..., None, :] + E)
    minus, _ = terminal_covector_field(model, z[..., None, :] - E)
    # row j of (plus - minus) is d phi / d z_j; transpose to phi_i / z_j
    return np.swapaxes((plus - minus) / (2 * step), -1, -2)


@dataclass
class SeedData:
    """Batched boundary data for a set of seeds."""

    eta: np.ndarray      # (S, n-1)
    z: np.ndarray        # (S, n)
    mu: np.ndarray       # (S,)
    phi: np.ndarray      # (S, n)
    tangent: np.ndarray  # (S, n, n-1)
    dphi_deta: np.ndarray  # (S, n, n-1)
    residual: np.ndarray   # (S,)


def chart_seed_data(model: HamiltonianModel, chart: BoundaryChart, eta,
                    step: float = FD_STEP) -> SeedData:
    """Terminal covectors and their chart derivatives at many chart points."""
    problem = model.problem
    eta = np.asarray(eta, float).reshape(-1, chart.dim)
    if not np.all(chart.contains(eta)):
        raise InvalidInputError("seed coordinates outside the chart domain")

    def phi_at(e):
        zz = chart.param(e)
        nrm, _ = problem.target.distance_gradient(zz)
        g = np.asarray(problem.terminal_grad(zz), float)
        mu, res = solve_mu_batch(model, zz, np.broadcast_to(g, zz.shape), nrm)
        return zz, mu, g + mu[..., None] * nrm, res

    z, mu, phi, res = phi_at(eta)
    nrm, ok = problem.target.distance_gradient(z)
    if not np.all(ok):
        raise NonsmoothPointError("seed on a corner of the target boundary")
    cols = []
    for k in range(chart.dim):
        d = np.zeros(chart.dim)
        d[k] = step
        cols.append((phi_at(eta + d)[2] - phi_at(eta - d)[2]) / (2 * step))
    return SeedData(eta, z, mu, phi, chart.tangent(eta), np.stack(cols, axis=-1), res)


def variational_init(flow: HamiltonianModel, seeds: SeedData):
    """Initial ``(A, B)`` for a batch of seeds under the flow Hamiltonian."""
    Hx, Hp = flow.gradients(seeds.z, seeds.phi)
    A = np.concatenate([Hp[..., None], seeds.tangent], axis=-1)
    B = np.concatenate([-Hx[..., None], seeds.dphi_deta], axis=-1)
    return A, B


def seed_variational_init(model: HamiltonianModel, chart: BoundaryChart, eta,
                          flow: Optional[HamiltonianModel] = None):
    """Initial variational matrices ``A = Y(z,0)`` and ``B = Q(z,0)`` at a seed.

    Columns are ordered (time, chart coordinates): ``A = [H_p | dz/deta]``
    and ``B = [-H_x | d(phi o param)/deta]``.  ``flow`` replaces the model for
    the derivative columns, e.g. a fixed-control selection at a kink.
    """
    chart_point(chart, eta)
    seeds = chart_seed_data(model, chart, eta)
    fm = model if flow is None else flow
    if flow is None and np.any(model.kink_distance(seeds.z, seeds.phi) < 1e-9):
        raise NonsmoothPointError("terminal covector lies on a kink of H")
    A, B = variational_init(fm, seeds)
    A, B = A[0], B[0]
    d = float(np.linalg.det(A))
    if abs(d) < DET_TOL:
        raise DegenerateSeedError(f"det A = {d:.3g} at z={seeds.z[0]}")
    return A, B
