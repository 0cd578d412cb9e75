"""Exit-time control problems and assumption checks.

A :class:`ControlProblem` bundles the control system ``x' = f(x, u)``, the
running cost ``L``, the terminal cost ``psi`` and the target ``K``.  Every
callable is evaluated on batched arrays: states ``(..., n)``, controls
``(..., m)``, so the integrators can push many characteristics at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .targets import TargetSet, boundary_seeds


@dataclass(frozen=True)
class RegularityFlags:
    """Declared (not verified) smoothness properties of a problem.

    ``data_order`` is the largest k for which f and L are C^k and the target
    boundary and terminal cost are C^(k+1); 0 means nothing is declared.
    """

    hamiltonian_c2: bool = False
    boundary_c2: bool = False
    data_order: int = 0
    unique_smooth_argmax: bool = False
    hpp_positive: bool = False
    hpp_kernel_dim_one: bool = False
    state_only_cost: bool = False


@dataclass(frozen=True)
class Bounds:
    speed: float          # N: |f| <= N
    cost_floor: float     # alpha: L >= alpha > 0
    terminal_lipschitz: float  # G: Lipschitz constant of psi near bdry K
    inward_margin: float  # gamma: min_u f(z,u).n_z <= -gamma


@dataclass(frozen=True)
class ControlProblem:
    dim_state: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    running_cost: Callable[[np.ndarray, np.ndarray], np.ndarray]
    terminal_cost: Callable[[np.ndarray], np.ndarray]
    terminal_grad: Callable[[np.ndarray], np.ndarray]
    control_sampler: Callable[[int], np.ndarray]
    target: TargetSet
    control_count: int = 720
    dynamics_dx: Optional[Callable] = None
    running_cost_dx: Optional[Callable] = None
    project_control: Optional[Callable] = None
    sample_box: Optional[tuple] = None
    lipschitz: tuple = (0.0, 0.0)   # (K1, K2): Lipschitz bounds of f and D_x f
    bounds: Optional[Bounds] = None
    flags: RegularityFlags = field(default_factory=RegularityFlags)
    name: str = ""

    @property
    def control_sample(self) -> np.ndarray:
        u = np.asarray(self.control_sampler(self.control_count), dtype=float)
        return u.reshape(len(u), -1)


# ---------------------------------------------------------------------------
# control set samplers

def circle_controls(radius: float, count: int) -> np.ndarray:
    """``count`` equally spaced points on the circle of the given radius."""
    a = 2 * np.pi * np.arange(count) / count
    return radius * np.stack([np.cos(a), np.sin(a)], axis=-1)


def disk_controls(radius: float, count: int, rings: int = 24) -> np.ndarray:
    """Polar sample of the closed disk: the center plus ``rings`` circles."""
    per = max(count // rings, 8)
    pts = [np.zeros((1, 2))]
    for k in range(1, rings + 1):
        pts.append(circle_controls(radius * k / rings, per))
    return np.concatenate(pts)


def box_controls(dims: int, per_axis: int) -> np.ndarray:
    """Tensor grid over [-1, 1]^dims, lexicographic, starting at (-1, ..., -1)."""
    g = np.linspace(-1.0, 1.0, per_axis)
    mesh = np.meshgrid(*([g] * dims), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    speed: float
    cost_floor: float
    terminal_lipschitz: float
    inward_margin: float
    compatibility_ok: bool
    inward_ok: bool
    samples: int
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.compatibility_ok and self.inward_ok and self.cost_floor > 0

    def to_dict(self) -> dict:
        return {
            "N": self.speed, "alpha": self.cost_floor, "G": self.terminal_lipschitz,
            "gamma": self.inward_margin, "G_lt_alpha_over_N": self.compatibility_ok,
            "gamma_positive": self.inward_ok, "passed": self.passed,
            "samples": self.samples, "notes": list(self.notes),
        }


def validate_assumptions(problem: ControlProblem, sample_budget: int = 256,
                         seed: int = 0) -> AssumptionReport:
    """Sampled check of the speed/cost bounds, the terminal-cost compatibility
    condition ``G < alpha / N`` and the inward-pointing margin ``gamma``.

    This is evidence on a finite sample, never a proof.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    rng = np.random.default_rng(seed)
    n = problem.dim_state
    U = problem.control_sample
    notes = []

    seeds = boundary_seeds(problem.target, sample_budget)
    z = np.stack([seeds.charts[c].param(e) for c, e in zip(seeds.chart_index, seeds.eta)])

    if problem.sample_box is not None:
        lo, hi = (np.broadcast_to(np.asarray(b, float), (n,)) for b in problem.sample_box)
        xs = lo + (hi - lo) * rng.random((sample_budget, n))
        xs = np.concatenate([xs, z])
    else:
        xs = z
        notes.append("no sample_box: bounds sampled on the boundary only")

    f = problem.dynamics(xs[:, None, :], U[None, :, :])
    speed = float(np.max(np.linalg.norm(f, axis=-1)))
    L = problem.running_cost(xs[:, None, :], U[None, :, :])
    alpha = float(np.min(L))

    # Lipschitz constant of psi near the boundary: gradient norms on and next to bdry K
    normals = problem.target.normal(z)
    near = np.concatenate([z, z + 1e-2 * normals, z - 1e-2 * normals])
    G = float(np.max(np.linalg.norm(problem.terminal_grad(near), axis=-1)))

    fz = problem.dynamics(z[:, None, :], U[None, :, :])
    inward = np.min(np.einsum("zun,zn->zu", fz, normals), axis=1)
    gamma = float(-np.max(inward))

    compat = G < alpha / speed if speed > 0 else True
    if not compat:
        notes.append(f"terminal cost too steep: G={G:.6g} >= alpha/N={alpha / speed:.6g}")
    if gamma <= 0:
        notes.append(f"inward-pointing condition fails: gamma={gamma:.6g}")
    if alpha <= 0:
        notes.append("running cost not bounded below by a positive constant")
    return AssumptionReport(speed, alpha, G, gamma, bool(compat), bool(gamma > 0),
                            len(xs), notes)
