"""Backward Hamiltonian characteristics, variational matrices and dual arcs.

Characteristics start on the target boundary at ``(z, phi(z))`` and run in
time-to-boundary ``t``:

    y' = H_p(y, q),   q' = -H_x(y, q),   c' = L(y, u*(y, q)),

so ``V(y(t)) = psi(z) + c(t)``.  The variational pair follows the linearized
flow ``W' = H_px W + H_pp R``, ``R' = -(H_xx W + H_xp R)``.  Everything is
integrated with fixed-step RK4 on batches of seeds.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (CapabilityError, DegenerateCovectorError, DegenerateSeedError,
                     InvalidInputError, NoExitError, NonsmoothCharacteristicError, NonsmoothPointError)
from .hamiltonian import COVECTOR_TOL, KINK_TOL, HamiltonianModel, SelectedControlHamiltonian
from .problem import ControlProblem
from .targets import BoundaryChart, SeedLayout, boundary_seeds
from .terminal import (DET_TOL, SeedData, TerminalCovector, chart_seed_data,
                       covector_jacobian, terminal_covector_field, variational_init)

ENTER_TOL = 1e-10
SELECTION_TOL = 1e-9
SEED_RESIDUAL_TOL = 1e-9

STOP_HORIZON = "horizon"
STOP_ENTERED = "entered-target"
STOP_BOX = "left-box"
STOP_COLLAPSE = "covector-collapse"
STOP_KINK = "kink"
STOP_SELECTION = "selection-lost"
STOP_DEGENERATE = "degenerate-seed"


def worker_count(requested: Optional[int] = None) -> int:
    """Worker threads for seed sweeps, capped by ``EXITFLOW_THREADS``."""
    cap = os.environ.get("EXITFLOW_THREADS")
    try:
        cap = max(int(cap), 1) if cap else 1
    except ValueError:
        cap = 1
    return cap if requested is None else max(1, min(int(requested), cap))


@dataclass
class Characteristic:
    """One recorded backward characteristic.

    Arrays are indexed by record ``i`` at ``times[i]``; ``Y``/``Q`` hold the
    variational matrices with columns (time, chart coordinates) and ``X``/``P``
    the tangent-kernel pair started from ``(I, D phi(z))`` when requested.
    """

    seed_id: int
    chart_index: int
    eta: np.ndarray
    z: np.ndarray
    mu: float
    phi: np.ndarray
    psi_z: float
    times: np.ndarray
    states: np.ndarray
    covectors: np.ndarray
    cost: np.ndarray
    velocity: np.ndarray
    Y: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    tangent: Optional[np.ndarray] = None
    selection: Optional[np.ndarray] = None
    stop_reason: str = STOP_HORIZON
    stop_time: float = 0.0
    step: float = 1e-3
    record_every: int = 1
    horizon: float = 0.0
    problem: Optional[ControlProblem] = field(default=None, repr=False)
    flow: Optional[HamiltonianModel] = field(default=None, repr=False)
    model: Optional[HamiltonianModel] = field(default=None, repr=False)

    @property
    def value(self) -> np.ndarray:
        return self.psi_z + self.cost

    @property
    def detY(self) -> Optional[np.ndarray]:
        return None if self.Y is None else np.linalg.det(self.Y)

    @property
    def seed(self) -> TerminalCovector:
        return TerminalCovector(self.z, self.mu, self.phi)

    def __len__(self):
        return len(self.times)


@dataclass
class Sweep:
    """Characteristics from many boundary seeds of one problem."""

    characteristics: list
    problem: ControlProblem = field(repr=False)
    model: HamiltonianModel = field(repr=False)
    step: float = 1e-3
    horizon: float = 0.0

    def __iter__(self):
        return iter(self.characteristics)

    def __len__(self):
        return len(self.characteristics)

    def __getitem__(self, i):
        return self.characteristics[i]

    def samples(self):
        """Flattened ``(states, covectors, values, times, seed ids, velocity, Y, Q, selected)``."""
        chars = [c for c in self.characteristics if len(c)]
        if not chars:
            n = self.problem.dim_state
            e = np.zeros((0, n))
            return e, e, np.zeros(0), np.zeros(0), np.zeros(0, int), e, None, None, np.zeros(0, bool)
        cat = lambda name: np.concatenate([getattr(c, name) for c in chars])
        ids = np.concatenate([np.full(len(c), c.seed_id) for c in chars])
        sel = np.concatenate([np.full(len(c), c.selection is not None) for c in chars])
        values = np.concatenate([c.value for c in chars])
        has_y = all(c.Y is not None for c in chars)
        Y = cat("Y") if has_y else None
        Q = cat("Q") if has_y else None
        return (cat("states"), cat("covectors"), values, cat("times"), ids, cat("velocity"),
                Y, Q, sel)


# ---------------------------------------------------------------------------
# RK4 core

def _rhs(problem, flow, y, q, W, R):
    Hx, Hp = flow.gradients(y, q)
    u = flow.argmax(y, q)
    L = problem.running_cost(y, u)
    bad = (flow.kink_distance(y, q) < KINK_TOL) | (np.linalg.norm(q, axis=-1) < COVECTOR_TOL)
    if W is None:
        return (Hp, -Hx, L, None, None), bad
    Hxx, Hxp, Hpp = flow.hessians(y, q)
    dW = np.swapaxes(Hxp, -1, -2) @ W + Hpp @ R
    dR = -(Hxx @ W + Hxp @ R)
    return (Hp, -Hx, L, dW, dR), bad


def rk4_step(problem, flow, state, dt):
    """One RK4 step of the augmented system; ``dt`` may be per element.

    Returns the new state and a mask of elements that touched a kink or a
    zero covector at some stage.
    """
    dt = np.asarray(dt, float)
    y, q, c, W, R = state

    def shift(s, k, a):
        out = []
        for si, ki in zip(s, k):
            if si is None:
                out.append(None)
                continue
            scale = (a * dt).reshape(dt.shape + (1,) * (si.ndim - dt.ndim))
            out.append(si + scale * ki)
        return out

    k1, b1 = _rhs(problem, flow, y, q, W, R)
    k2, b2 = _rhs(problem, flow, *[v for i, v in enumerate(shift(state, k1, 0.5)) if i != 2])
    k3, b3 = _rhs(problem, flow, *[v for i, v in enumerate(shift(state, k2, 0.5)) if i != 2])
    k4, b4 = _rhs(problem, flow, *[v for i, v in enumerate(shift(state, k3, 1.0)) if i != 2])
    new = []
    for i, s in enumerate(state):
        if s is None:
            new.append(None)
            continue
        inc = (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) / 6.0
        new.append(s + (dt.reshape(dt.shape + (1,) * (s.ndim - dt.ndim))) * inc)
    return tuple(new), b1 | b2 | b3 | b4


def time_grid(horizon: float, step: float) -> np.ndarray:
    """Step sizes covering ``[0, horizon]``: full steps plus one partial step."""
    if horizon <= 0 or step <= 0:
        raise InvalidInputError("horizon and step must be positive")
    k = int(np.ceil(horizon / step - 1e-9))
    dts = np.full(k, step)
    dts[-1] = horizon - step * (k - 1)
    return dts


def _in_box(y, box):
    if box is None:
        return np.ones(y.shape[:-1], bool)
    lo, hi = box
    return np.all((y >= np.asarray(lo) - 1e-12) & (y <= np.asarray(hi) + 1e-12), axis=-1)


def _integrate_batch(problem, flow, y0, q0, W0, R0, horizon, step, record_every, box,
                     true_model=None):
    """Integrate a batch of seeds; returns per-seed record arrays and stop data."""
    S, n = y0.shape
    dts = time_grid(horizon, step)
    rec_steps = [0] + [i + 1 for i in range(len(dts)) if (i + 1) % record_every == 0
                       or i + 1 == len(dts)]
    rec_set = {s: j for j, s in enumerate(rec_steps)}
    nrec = len(rec_steps)
    t_rec = np.concatenate([[0.0], np.cumsum(dts)])[rec_steps]

    ys = np.empty((nrec, S, n))
    qs = np.empty((nrec, S, n))
    cs = np.empty((nrec, S))
    Ws = None if W0 is None else np.empty((nrec,) + W0.shape)
    Rs = None if W0 is None else np.empty((nrec,) + W0.shape)
    count = np.ones(S, int)
    reason = np.array([STOP_HORIZON] * S, dtype=object)
    stop_t = np.full(S, float(np.sum(dts)))

    state = [y0.copy(), q0.copy(), np.zeros(S), None if W0 is None else W0.copy(),
             None if R0 is None else R0.copy()]
    ys[0], qs[0], cs[0] = y0, q0, 0.0
    if W0 is not None:
        Ws[0], Rs[0] = W0, R0
    active = np.ones(S, bool)
    t = 0.0
    for i, dt in enumerate(dts):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        sub = tuple(None if s is None else s[idx] for s in state)
        new, bad = rk4_step(problem, flow, sub, np.full(idx.size, dt))
        t_new = t + dt
        y, q = new[0], new[1]
        stop = np.zeros(idx.size, bool)
        why = np.empty(idx.size, dtype=object)
        checks = [
            (bad & (np.linalg.norm(sub[1], axis=-1) >= COVECTOR_TOL), STOP_KINK, t),
            (bad, STOP_COLLAPSE, t),
            (problem.target.oriented_distance(y) < -ENTER_TOL, STOP_ENTERED, t_new),
            (~_in_box(y, box), STOP_BOX, t_new),
            (np.linalg.norm(q, axis=-1) < COVECTOR_TOL, STOP_COLLAPSE, t_new),
        ]
        if true_model is not None:
            gap = np.abs(true_model.value(y, q) - flow.value(y, q))
            checks.append((gap > SELECTION_TOL, STOP_SELECTION, t_new))
        for mask, label, when in checks:
            m = mask & ~stop
            why[m] = label
            stop_t[idx[m]] = when
            stop |= m
        reason[idx[stop]] = why[stop]
        active[idx[stop]] = False
        keep = idx[~stop]
        for s_full, s_new in zip(state, new):
            if s_full is not None:
                s_full[keep] = s_new[~stop]
        t = t_new
        j = rec_set.get(i + 1)
        if j is not None and keep.size:
            ys[j, keep] = state[0][keep]
            qs[j, keep] = state[1][keep]
            cs[j, keep] = state[2][keep]
            if W0 is not None:
                Ws[j, keep] = state[3][keep]
                Rs[j, keep] = state[4][keep]
            count[keep] = j + 1
    return t_rec, ys, qs, cs, Ws, Rs, count, reason, stop_t


# ---------------------------------------------------------------------------

def _layout_seed_data(model, layout: SeedLayout):
    """Per-seed boundary data in layout order."""
    parts = {}
    for ci in np.unique(layout.chart_index):
        sel = np.nonzero(layout.chart_index == ci)[0]
        parts[int(ci)] = (sel, chart_seed_data(model, layout.charts[ci], layout.eta[sel]))
    S = len(layout)
    n = model.problem.dim_state
    k = layout.eta.shape[1]
    out = SeedData(layout.eta.copy(), np.empty((S, n)), np.empty(S), np.empty((S, n)),
                   np.empty((S, n, k)), np.empty((S, n, k)), np.empty(S))
    for sel, sd in parts.values():
        for name in ("z", "mu", "phi", "tangent", "dphi_deta", "residual"):
            getattr(out, name)[sel] = getattr(sd, name)
    return out


def _subset(sd: SeedData, idx) -> SeedData:
    return SeedData(*(getattr(sd, f)[idx] for f in
                      ("eta", "z", "mu", "phi", "tangent", "dphi_deta", "residual")))


def _fan_controls(model, z, phi, fan):
    """``fan`` evenly spaced members of the sampled argmax set at ``(z, phi)``."""
    U = model.argmax_set(z, phi)
    if len(U) <= fan:
        return U
    pick = np.unique(np.round(np.linspace(0, len(U) - 1, fan)).astype(int))
    return U[pick]


def _run_group(problem, model, flow, sd, seed_ids, chart_idx, horizon, step, record_every,
               box, tangent, variational, selection=None, true_model=None):
    S = len(sd.z)
    n = problem.dim_state
    A = B = None
    if variational or tangent:
        A, B = variational_init(flow, sd)
        W0, R0 = A, B
        if tangent:
            Dphi = covector_jacobian(model, sd.z)
            W0 = np.concatenate([A, np.broadcast_to(np.eye(n), (S, n, n))], axis=-1)
            R0 = np.concatenate([B, Dphi], axis=-1)
    else:
        W0 = R0 = None
    t_rec, ys, qs, cs, Ws, Rs, count, reason, stop_t = _integrate_batch(
        problem, flow, sd.z, sd.phi, W0, R0, horizon, step, record_every, box, true_model)
    psi = np.asarray(problem.terminal_cost(sd.z), float)
    out = []
    for s in range(S):
        m = count[s]
        Ys = Qs = Xs = Ps = None
        if Ws is not None:
            Wm, Rm = Ws[:m, s], Rs[:m, s]
            if variational:
                Ys, Qs = Wm[..., :n], Rm[..., :n]
            if tangent:
                Xs, Ps = Wm[..., -n:], Rm[..., -n:]
        _, vel = flow.gradients(ys[:m, s], qs[:m, s])
        r = reason[s]
        if A is not None and abs(np.linalg.det(A[s])) < DET_TOL and r == STOP_HORIZON:
            r = STOP_DEGENERATE
        out.append(Characteristic(
            seed_id=int(seed_ids[s]), chart_index=int(chart_idx[s]), eta=sd.eta[s].copy(),
            z=sd.z[s].copy(), mu=float(sd.mu[s]), phi=sd.phi[s].copy(), psi_z=float(psi[s]),
            times=t_rec[:m].copy(), states=ys[:m, s].copy(), covectors=qs[:m, s].copy(),
            cost=cs[:m, s].copy(), velocity=np.asarray(vel, float), Y=Ys, Q=Qs, X=Xs, P=Ps,
            tangent=sd.tangent[s].copy(), selection=selection, stop_reason=r,
            stop_time=float(stop_t[s]), step=step, record_every=record_every, horizon=horizon,
            problem=problem, flow=flow, model=model))
    return out


def _sweep_chunk(problem, model, sd, seed_ids, chart_idx, horizon, step, record_every, box,
                 tangent, variational, fan):
    kink = model.kink_distance(sd.z, sd.phi) < KINK_TOL
    results = []
    smooth = np.nonzero(~kink)[0]
    if smooth.size:
        results += _run_group(problem, model, model, _subset(sd, smooth), seed_ids[smooth],
                              chart_idx[smooth], horizon, step, record_every, box, tangent,
                              variational)
    groups: dict = {}
    for s in np.nonzero(kink)[0]:
        if fan <= 0:
            results.append(_stub(problem, model, sd, s, seed_ids[s], chart_idx[s], STOP_KINK,
                                 step, record_every, horizon))
            continue
        for u in _fan_controls(model, sd.z[s], sd.phi[s], fan):
            groups.setdefault(tuple(np.round(u, 12)), []).append(s)
    for key, members in groups.items():
        u = np.array(key)
        flow = SelectedControlHamiltonian(problem, u)
        members = np.array(members)
        results += _run_group(problem, model, flow, _subset(sd, members), seed_ids[members],
                              chart_idx[members], horizon, step, record_every, box, False,
                              variational, selection=u, true_model=model)
    return results


def _stub(problem, model, sd, s, seed_id, chart_index, reason, step, record_every, horizon):
    n = problem.dim_state
    return Characteristic(
        seed_id=int(seed_id), chart_index=int(chart_index), eta=sd.eta[s].copy(),
        z=sd.z[s].copy(), mu=float(sd.mu[s]), phi=sd.phi[s].copy(),
        psi_z=float(problem.terminal_cost(sd.z[s])), times=np.zeros(1),
        states=sd.z[s][None].copy(), covectors=sd.phi[s][None].copy(), cost=np.zeros(1),
        velocity=np.full((1, n), np.nan), tangent=sd.tangent[s].copy(), stop_reason=reason,
        stop_time=0.0, step=step, record_every=record_every, horizon=horizon,
        problem=problem, flow=model, model=model)


def sweep(problem: ControlProblem, model: HamiltonianModel, seeds=64, horizon: float = 1.0,
          step: float = 1e-3, *, record_every: int = 1, box=None, variational: bool = True,
          tangent: bool = False, fan: int = 0, chunk: int = 256,
          workers: Optional[int] = None) -> Sweep:
    """Integrate characteristics from many boundary seeds.

    Parameters
    ----------
    seeds : int or SeedLayout
        Seed count (spread over the target charts) or an explicit layout.
    box : ((lo...), (hi...)), optional
        Characteristics stop when they leave this box.
    fan : int
        For seeds whose covector sits on a kink of ``H``, integrate this many
        fixed-control selections from the sampled argmax set (0 records a
        ``kink`` stop instead).
    workers : int, optional
        Thread count, capped by ``EXITFLOW_THREADS`` (default 1).

    Failures never raise here; each characteristic carries a stop reason.
    """
    if record_every < 1:
        raise InvalidInputError("record_every must be >= 1")
    layout = seeds if isinstance(seeds, SeedLayout) else boundary_seeds(problem.target, int(seeds))
    sd = _layout_seed_data(model, layout)
    ids = np.arange(len(layout))
    bounds = [(a, min(a + chunk, len(ids))) for a in range(0, len(ids), chunk)]

    def job(ab):
        a, b = ab
        sl = np.arange(a, b)
        return _sweep_chunk(problem, model, _subset(sd, sl), ids[sl], layout.chart_index[sl],
                            horizon, step, record_every, box, tangent, variational, fan)

    nw = worker_count(workers)
    if nw > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=nw) as ex:
            parts = list(ex.map(job, bounds))
    else:
        parts = [job(ab) for ab in bounds]
    chars = [c for part in parts for c in part]
    chars.sort(key=lambda c: (c.seed_id, () if c.selection is None else tuple(c.selection)))
    return Sweep(chars, problem, model, step, horizon)


def locate_on_charts(target, z, samples: int = 4097):
    """Chart index and coordinate of the boundary point ``z`` (1-D charts)."""
    z = np.asarray(z, float)
    best = (np.inf, None, None)
    for ci, ch in enumerate(target.charts()):
        e = np.linspace(ch.lo[0], ch.hi[0], samples)[:, None]
        d = np.linalg.norm(ch.param(e) - z, axis=-1)
        k = int(np.argmin(d))
        lo, hi = e[max(k - 1, 0), 0], e[min(k + 1, samples - 1), 0]
        f = lambda s: np.linalg.norm(ch.param(np.array([[s]]))[0] - z)
        for _ in range(80):
            m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            if f(m1) < f(m2):
                hi = m2
            else:
                lo = m1
        s = 0.5 * (lo + hi)
        if f(s) < best[0]:
            best = (f(s), ci, np.array([s]))
    if best[1] is None or best[0] > 1e-8:
        raise InvalidInputError(f"{z} is not on a chart of the target boundary")
    return best[1], best[2]


def integrate_backward(problem: ControlProblem, model: HamiltonianModel, seed: TerminalCovector,
                       eta=None, horizon: float = 1.0, step: float = 1e-3, *,
                       chart: Optional[BoundaryChart] = None, box=None, record_every: int = 1,
                       variational: bool = True, tangent: bool = False,
                       flow: Optional[HamiltonianModel] = None) -> Characteristic:
    """Integrate one characteristic from ``seed``.

    ``eta`` locates the seed on ``chart``; both are found from ``seed.z`` when
    omitted.  ``flow`` replaces the Hamiltonian driving the flow (a
    fixed-control selection, for instance).

    Raises
    ------
    NonsmoothCharacteristicError
        The flow hits a kink of ``H`` (``.time`` holds the offending time).
    DegenerateCovectorError
        The covector collapses to zero.
    """
    res = abs(float(model.value(seed.z, seed.phi)))
    if res > SEED_RESIDUAL_TOL:
        raise InvalidInputError(f"seed residual |H(z, phi)| = {res:.3g} exceeds tolerance")
    if chart is None:
        ci, e = locate_on_charts(problem.target, seed.z)
        chart = problem.target.charts()[ci]
        eta = e if eta is None else eta
    else:
        ci = 0
        if eta is None:
            raise InvalidInputError("eta is required with an explicit chart")
    sd = chart_seed_data(model, chart, np.atleast_1d(eta))
    fm = model if flow is None else flow
    if flow is None and model.kink_distance(sd.z[0], sd.phi[0]) < KINK_TOL:
        raise NonsmoothCharacteristicError("seed covector lies on a kink of H", time=0.0)
    selection = getattr(flow, "control", None)
    out = _run_group(problem, model, fm, sd, np.array([0]), np.array([ci]), horizon, step,
                     record_every, box, tangent, variational, selection=selection,
                     true_model=None if flow is None else model)[0]
    if out.stop_reason == STOP_KINK:
        raise NonsmoothCharacteristicError(
            f"characteristic reached a kink of H at t={out.stop_time:.6g}", time=out.stop_time)
    if out.stop_reason == STOP_COLLAPSE:
        raise DegenerateCovectorError(f"covector collapsed at t={out.stop_time:.6g}")
    return out


def integrate_variational(char: Characteristic, problem: Optional[ControlProblem] = None,
                          model: Optional[HamiltonianModel] = None):
    """Variational series ``(Y, Q)`` on the characteristic's own RK4 grid."""
    if char.Y is not None and char.Q is not None:
        return char.Y, char.Q
    problem = problem or char.problem
    model = model or char.model
    flow = char.flow if char.selection is not None else model
    chart = problem.target.charts()[char.chart_index]
    sd = chart_seed_data(model, chart, char.eta)
    A, B = variational_init(flow, sd)
    out = _integrate_batch(problem, flow, sd.z, sd.phi, A, B, char.horizon, char.step,
                           char.record_every, None, None if char.selection is None else model)
    m = len(char.times)
    return out[4][:m, 0], out[5][:m, 0]


# ---------------------------------------------------------------------------
# open-loop trajectories and dual arcs

class PiecewiseConstantControl:
    """``u(t) = values[k]`` for ``breaks[k-1] <= t < breaks[k]``."""

    def __init__(self, breaks: Sequence[float], values):
        self.breaks = np.asarray(breaks, float)
        self.values = np.atleast_2d(np.asarray(values, float))
        if len(self.values) != len(self.breaks) + 1:
            raise InvalidInputError("need one more control value than break points")
        if np.any(np.diff(self.breaks) < 0):
            raise InvalidInputError("break points must be nondecreasing")

    def __call__(self, t):
        k = np.searchsorted(self.breaks, np.asarray(t, float), side="right")
        return self.values[k]

    @classmethod
    def constant(cls, value):
        return cls([], [value])


def simulate_trajectory(problem: ControlProblem, x0, control: Callable, T: float,
                        step: float = 1e-3):
    """Forward RK4 of ``x' = f(x, u(t))`` with running-cost quadrature.

    Returns ``(times, states, cost)`` where ``cost[i] = int_0^{t_i} L``.
    """
    x = np.asarray(x0, float).copy()
    dts = time_grid(T, step)
    ts = np.concatenate([[0.0], np.cumsum(dts)])
    xs = np.empty((len(ts), x.size))
    cs = np.zeros(len(ts))
    xs[0] = x

    def rhs(t, x):
        u = control(t)
        return problem.dynamics(x, u), problem.running_cost(x, u)

    for i, dt in enumerate(dts):
        t = ts[i]
        f1, l1 = rhs(t, x)
        f2, l2 = rhs(t + dt / 2, x + dt / 2 * f1)
        f3, l3 = rhs(t + dt / 2, x + dt / 2 * f2)
        f4, l4 = rhs(t + dt, x + dt * f3)
        x = x + dt * (f1 + 2 * f2 + 2 * f3 + f4) / 6
        cs[i + 1] = cs[i] + dt * float(l1 + 2 * l2 + 2 * l3 + l4) / 6
        xs[i + 1] = x
    return ts, xs, cs


@dataclass
class DualArc:
    times: np.ndarray
    states: np.ndarray
    covectors: np.ndarray
    controls: np.ndarray
    terminal: TerminalCovector
    residual: float


def dual_arc(problem: ControlProblem, model: HamiltonianModel, x0, control: Callable,
             tau: float, step: float = 1e-3, exit_tol: float = 1e-6) -> DualArc:
    """Adjoint arc along the trajectory of ``control`` from ``x0``.

    The state runs forward to ``z = x(tau)``; the adjoint
    ``p' = -D_x f^T p - L_x`` then runs backward from ``p(tau) = phi(z)``
    jointly with the state.
    """
    if problem.dynamics_dx is None or problem.running_cost_dx is None:
        raise CapabilityError("dual arcs need D_x f and L_x")
    ts, xs, _ = simulate_trajectory(problem, x0, control, tau, step)
    b = problem.target.oriented_distance(xs)
    if abs(b[-1]) > exit_tol or np.any(b[:-1] < -exit_tol):
        raise NoExitError(f"trajectory does not reach the target boundary at tau "
                          f"(b_K(x(tau)) = {b[-1]:.3g})")
    z = xs[-1]
    phi, mu = terminal_covector_field(model, z)
    phi = np.asarray(phi, float)

    def rhs(t, x, p):
        u = control(t)
        J = problem.dynamics_dx(x, u)
        return problem.dynamics(x, u), -(J.T @ p) - problem.running_cost_dx(x, u)

    ps = np.empty_like(xs)
    ps[-1] = phi
    x, p = z.copy(), phi.copy()
    # backward sweep from tau, mirroring the forward grid; evaluate u just
    # inside each interval so jumps at break points are seen from the left
    for i in range(len(ts) - 1, 0, -1):
        dt = ts[i - 1] - ts[i]
        t = ts[i] - 1e-12 * abs(dt)
        f1, g1 = rhs(t, x, p)
        f2, g2 = rhs(t + dt / 2, x + dt / 2 * f1, p + dt / 2 * g1)
        f3, g3 = rhs(t + dt / 2, x + dt / 2 * f2, p + dt / 2 * g2)
        f4, g4 = rhs(ts[i - 1], x + dt * f3, p + dt * g3)
        x = x + dt * (f1 + 2 * f2 + 2 * f3 + f4) / 6
        p = p + dt * (g1 + 2 * g2 + 2 * g3 + g4) / 6
        ps[i - 1] = p
    us = np.array([control(t) for t in ts], dtype=float).reshape(len(ts), -1)
    res = pmp_residual(problem, model, xs, ps, us)
    return DualArc(ts, xs, ps, us, TerminalCovector(z, float(mu), phi), res)


def pmp_residual(problem: ControlProblem, model: HamiltonianModel, states, covectors,
                 controls) -> float:
    """``max_t | -p.f(x,u) - L(x,u) - H(x,p) |`` on aligned grids."""
    x = np.asarray(states, float)
    p = np.asarray(covectors, float)
    u = np.asarray(controls, float)
    lhs = -np.sum(p * problem.dynamics(x, u), -1) - problem.running_cost(x, u)
    return float(np.max(np.abs(lhs - model.value(x, p))))


def hamiltonian_system_residual(char: Characteristic, model: Optional[HamiltonianModel] = None) -> float:
    """Residual of the forward system ``x' = -H_p, p' = H_x`` on the reversed path.

    Derivatives of the stored path use a five-point stencil, so the records
    must be equally spaced (``record_every`` steps apart).
    """
    flow = model or char.flow
    if len(char) < 5:
        raise InvalidInputError("need at least five records")
    # reversed path: x(s) = y(T - s)
    xs = char.states[::-1]
    ps = char.covectors[::-1]
    h = char.step * char.record_every
    ok = np.abs(np.diff(char.times) - h) < 1e-12
    n = len(xs)
    res = 0.0
    for i in range(2, n - 2):
        if not np.all(ok[n - 1 - (i + 2): n - 1 - (i - 2)]):
            continue
        dx = (-xs[i + 2] + 8 * xs[i + 1] - 8 * xs[i - 1] + xs[i - 2]) / (12 * h)
        dp = (-ps[i + 2] + 8 * ps[i + 1] - 8 * ps[i - 1] + ps[i - 2]) / (12 * h)
        Hx, Hp = flow.gradients(xs[i], ps[i])
        res = max(res, float(np.max(np.abs(dx + Hp))), float(np.max(np.abs(dp - Hx))))
    return res
