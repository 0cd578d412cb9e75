"""Value field from characteristics, field comparison and pointwise probes.

``build_field`` scatters characteristic samples onto a grid, keeping the
minimum corrected value per node (the value function is an infimum over
trajectories).  Samples also carry the local Hessian ``S = Q Y^{-1}``; when it
is well conditioned it adds a quadratic term to the value correction and
transports covectors to the node, which keeps neighboring arrivals of one
smooth front from being counted as distinct.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .characteristics import Sweep, simulate_trajectory
from .errors import (EmptyFieldWarning, IncompatibleGridsError, InsufficientResolutionError,
                     InvalidInputError)
from .grid import ValueGrid, make_nodes
from .problem import ControlProblem

ANGLE_TOL = 1e-3
MIN_PROBE_NODES = 8


def _angles(a, b):
    """Angle between rows of ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    cos = np.sum(a * b, -1) / np.where(na * nb > 0, na * nb, 1.0)
    sin = np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]) / np.where(na * nb > 0, na * nb, 1.0) \
        if a.shape[-1] == 2 else None
    if sin is not None:
        return np.arctan2(sin, cos)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def _distinct(pa, pb, va, vb, sa, sb, tol):
    """Arrivals are distinct when covectors differ in angle, or, for two
    fixed-control selections, when their velocities do."""
    d = _angles(pa, pb) >= tol
    both = sa & sb
    if np.any(both):
        d = d | (both & (_angles(va, vb) >= tol))
    return d


def _hessians(Y, Q, p, det_floor=1e-8):
    """``S = Q Y^{-1}`` where ``Y`` is safely invertible, else zeros."""
    n = p.shape[-1]
    if Y is None:
        return np.zeros(p.shape + (n,)), np.zeros(len(p), bool)
    det = np.linalg.det(Y)
    ok = np.abs(det) > det_floor
    S = np.zeros(p.shape + (n,))
    if np.any(ok):
        S[ok] = Q[ok] @ np.linalg.inv(Y[ok])
        S[ok] = 0.5 * (S[ok] + np.swapaxes(S[ok], -1, -2))
    return S, ok


def build_field(sweep: Sweep, box, h: float, *, angle_tol: Optional[float] = None,
                window: Optional[float] = None, radius: Optional[float] = None) -> ValueGrid:
    """Grid the value function from a characteristic sweep.

    Each node takes the minimum, over samples within ``radius`` (default
    ``h``), of ``V_s + p.d + d.S.d / 2`` with ``d = node - sample``.  Samples
    within ``window`` (default ``2 h^2``) of that minimum are clustered by
    transported-covector angle; the cluster count is the node's arrival
    multiplicity.  Nodes in the target get ``psi``; unreached nodes ``inf``.
    The default ``angle_tol`` is ``max(1e-3, h)``: transporting a covector by
    ``d`` leaves an ``O(h^2)`` error that a fixed tolerance would mistake for a
    second arrival on strongly curved fronts.
    """
    problem = sweep.problem
    n = problem.dim_state
    lo, shape, pts = make_nodes(box, h, n)
    shape_arr = np.asarray(shape)
    radius = h if radius is None else float(radius)
    window = 2 * h * h if window is None else float(window)
    angle_tol = max(ANGLE_TOL, h) if angle_tol is None else float(angle_tol)
    N = int(np.prod(shape))
    P = pts.reshape(-1, n)
    inK = problem.target.contains(P)

    X, Pc, Vs, Ts, ids, vel, Y, Q, sel = sweep.samples()
    S, good = _hessians(Y, Q, Pc)

    best = np.full(N, np.inf)
    cands = []
    r = (X - lo) / h
    base = np.floor(r).astype(int)
    for corner in range(2 ** n):
        bits = np.array([(corner >> d) & 1 for d in range(n)])
        k = base + bits
        ok = np.all((k >= 0) & (k < shape_arr), axis=-1)
        if not np.any(ok):
            continue
        node = np.ravel_multi_index(tuple(k[ok].T), shape)
        d = P[node] - X[ok]
        dist = np.linalg.norm(d, axis=-1)
        near = (dist <= radius + 1e-12) & ~inK[node]
        if not np.any(near):
            continue
        src = np.nonzero(ok)[0][near]
        node, d = node[near], d[near]
        p = Pc[src]
        Sd = np.einsum("kij,kj->ki", S[src], d)
        # quadratic transport only when it is a small correction
        use = good[src] & (np.linalg.norm(Sd, axis=-1) <= 0.5 * np.linalg.norm(p, axis=-1))
        Sd = np.where(use[:, None], Sd, 0.0)
        val = Vs[src] + np.sum(p * d, -1) + 0.5 * np.sum(Sd * d, -1)
        cands.append((node, val, p + Sd, src))
        np.minimum.at(best, node, val)

    values = np.where(inK, np.asarray(problem.terminal_cost(P), float), best)
    grads = np.full((N, n), np.nan)
    grads[inK] = np.asarray(problem.terminal_grad(P[inK]), float).reshape(-1, n)
    mult = np.zeros(N, int)
    arrivals = {}
    if cands:
        node = np.concatenate([c[0] for c in cands])
        val = np.concatenate([c[1] for c in cands])
        ptr = np.concatenate([c[2] for c in cands])
        src = np.concatenate([c[3] for c in cands])
        keep = val <= best[node] + window
        node, val, ptr, src = node[keep], val[keep], ptr[keep], src[keep]
        order = np.lexsort((src, node))
        node, val, ptr, src = node[order], val[order], ptr[order], src[order]
        starts = np.concatenate([[0], np.nonzero(np.diff(node))[0] + 1])
        group = np.repeat(np.arange(len(starts)), np.diff(np.concatenate([starts, [len(node)]])))
        ref = starts[group]
        far = _distinct(ptr, ptr[ref], vel[src], vel[src[ref]], sel[src], sel[src[ref]], angle_tol)
        spread = np.zeros(len(starts), bool)
        np.logical_or.at(spread, group, far)
        gnodes = node[starts]
        mult[gnodes] = 1
        ends = np.concatenate([starts[1:], [len(node)]])
        for g_i in np.nonzero(spread)[0]:
            a, b = starts[g_i], ends[g_i]
            reps = _cluster(ptr[a:b], vel[src[a:b]], sel[src[a:b]], angle_tol)
            mult[gnodes[g_i]] = len(reps)
            arrivals[int(gnodes[g_i])] = [
                {"value": float(val[a + k]), "covector": ptr[a + k].tolist(),
                 "seed": int(ids[src[a + k]]), "time": float(Ts[src[a + k]]),
                 "velocity": vel[src[a + k]].tolist()} for k in reps]
        # gradient estimate from the minimizing arrival
        vmin_pos = np.lexsort((val, node))
        first = vmin_pos[np.concatenate([[0], np.nonzero(np.diff(node[vmin_pos]))[0] + 1])]
        grads[node[first]] = ptr[first]
    if not np.any(np.isfinite(best)):
        warnings.warn("no characteristic sample reached the grid", EmptyFieldWarning, stacklevel=2)
    meta = {"radius": radius, "window": window, "angle_tol": angle_tol,
            "samples": int(len(Vs)), "characteristics": len(sweep)}
    return ValueGrid(lo, float(h), values.reshape(shape), "characteristics",
                     in_target=inK.reshape(shape), gradients=grads.reshape(shape + (n,)),
                     multiplicity=mult.reshape(shape), arrivals=arrivals, meta=meta)


def _cluster(p, v, s, tol):
    """Greedy representatives: indices of mutually distinct arrivals."""
    # collapse near-identical arrivals before the pairwise pass
    unit = lambda a: a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-300)
    key = np.round(np.concatenate([unit(p), np.where(s[:, None], unit(v), 0.0)], -1) / (0.25 * tol))
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    if len(first) < len(p):
        return [int(first[r]) for r in _cluster(p[first], v[first], s[first], tol)]
    k = len(p)
    i, j = np.triu_indices(k, 1)
    D = np.zeros((k, k), bool)
    D[i, j] = _distinct(p[i], p[j], v[i], v[j], s[i], s[j], tol)
    D |= D.T
    reps = [0]
    for a in range(1, k):
        if D[a, reps].all():
            reps.append(a)
    return reps


# ---------------------------------------------------------------------------

@dataclass
class ErrorStats:
    sup: float
    l1_mean: float
    count: int
    worst: list = field(default_factory=list)

    def to_dict(self):
        return {"sup": self.sup, "l1_mean": self.l1_mean, "count": self.count,
                "worst": self.worst}


def compare_fields(a: ValueGrid, b: ValueGrid, mask=None, worst: int = 5) -> ErrorStats:
    """Sup and mean absolute difference over finite, non-target nodes.

    ``mask`` (boolean grid or callable on node points) restricts the nodes
    further.
    """
    if not a.same_layout(b):
        raise IncompatibleGridsError(f"grids differ: {a.shape}/{a.h} vs {b.shape}/{b.h}")
    keep = np.isfinite(a.values) & np.isfinite(b.values)
    for g in (a, b):
        if g.in_target is not None:
            keep &= ~g.in_target
    if mask is not None:
        m = mask(a.points()) if callable(mask) else np.asarray(mask, bool)
        keep &= m
    diff = np.abs(a.values - b.values)
    if not np.any(keep):
        return ErrorStats(0.0, 0.0, 0, [])
    d = diff[keep]
    pts = a.points()[keep]
    top = np.argsort(-d, kind="stable")[:worst]
    offenders = [{"x": pts[k].tolist(), "a": float(a.values[keep][k]),
                  "b": float(b.values[keep][k]), "diff": float(d[k])} for k in top]
    return ErrorStats(float(d.max()), float(d.mean()), int(d.size), offenders)


def analytic_grid(fn: Callable, box, h: float, dim: int = 2, in_target=None) -> ValueGrid:
    """Grid of a closed-form value function (for comparisons)."""
    lo, shape, pts = make_nodes(box, h, dim)
    vals = np.asarray(fn(pts), float)
    mask = None if in_target is None else np.asarray(in_target(pts), bool)
    return ValueGrid(lo, float(h), vals, "external", in_target=mask)


# ---------------------------------------------------------------------------
# pointwise probes

def default_curvature(problem: ControlProblem) -> float:
    """Probe constant ``(1 + K1 + K2) N / alpha`` from the problem's bounds."""
    K1, K2 = problem.lipschitz
    if problem.bounds is not None:
        N, alpha = problem.bounds.speed, problem.bounds.cost_floor
    else:
        N, alpha = 1.0, 1.0
    return float((1.0 + K1 + K2) * N / alpha)


def _ball(field: ValueGrid, x, r):
    x = np.asarray(x, float)
    pts = field.points().reshape(-1, field.dim)
    vals = field.values.reshape(-1)
    d = pts - x
    inb = (np.linalg.norm(d, axis=-1) <= r + 1e-12)
    if not np.all(np.isfinite(vals[inb])):
        raise InvalidInputError("field is not finite on the probe ball")
    if np.count_nonzero(inb) < MIN_PROBE_NODES:
        raise InsufficientResolutionError(
            f"only {np.count_nonzero(inb)} nodes within r={r} (need {MIN_PROBE_NODES})")
    vx = float(field.interp(x))
    if not np.isfinite(vx):
        raise InvalidInputError("field is not finite at x")
    return d[inb], vals[inb] - vx


def check_superdifferential(field: ValueGrid, x, p, r: float, c: float) -> float:
    """``min_y [p.(y-x) + c|y-x|^2 - (V(y) - V(x))]`` over nodes in ``B(x, r)``.

    Nonnegative means ``p`` passes as a superdifferential at grid resolution.
    """
    d, dv = _ball(field, x, r)
    p = np.asarray(p, float)
    return float(np.min(d @ p + c * np.sum(d * d, -1) - dv))


def check_proximal_subdifferential(field: ValueGrid, x, p, r: float, c: float) -> float:
    """``min_y [V(y) - V(x) - p.(y-x) + c|y-x|^2]`` over nodes in ``B(x, r)``."""
    d, dv = _ball(field, x, r)
    p = np.asarray(p, float)
    return float(np.min(dv - d @ p + c * np.sum(d * d, -1)))


def semiconcavity_probe(field: ValueGrid, region, steps: Sequence[int] = (1, 2, 3)) -> float:
    """Largest second-difference quotient ``[V(x+d) + V(x-d) - 2V(x)] / |d|^2``.

    ``d`` runs over axis and diagonal directions scaled by ``k h`` for ``k`` in
    ``steps``, so the probe sharpens with the grid.  Stencils that touch an
    unreached or target node are skipped.
    """
    lo, hi = (np.asarray(b, float) for b in region)
    V = field.values
    bad = ~np.isfinite(V)
    if field.in_target is not None:
        bad = bad | field.in_target
    pts = field.points()
    inside = np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=-1) & ~bad
    n = field.dim
    dirs = []
    for d in range(n):
        e = np.zeros(n, int)
        e[d] = 1
        dirs.append(e)
    if n == 2:
        dirs += [np.array([1, 1]), np.array([1, -1])]
    best = -np.inf
    idx = np.array(np.nonzero(inside)).T
    shape = np.asarray(V.shape)
    for k in steps:
        for e in dirs:
            off = k * e
            a, b = idx + off, idx - off
            ok = np.all((a >= 0) & (a < shape) & (b >= 0) & (b < shape), axis=-1)
            if not np.any(ok):
                continue
            i0, ia, ib = (tuple(m[ok].T) for m in (idx, a, b))
            ok2 = ~bad[ia] & ~bad[ib]
            if not np.any(ok2):
                continue
            q = (V[ia] + V[ib] - 2 * V[i0])[ok2] / (field.h ** 2 * float(off @ off))
            best = max(best, float(np.max(q)))
    return best


def semiconcavity_bounded(q_coarse: float, q_fine: float, slack: float = 1.5,
                          floor: float = 1.0) -> bool:
    """Refinement test: bounded iff ``q_fine <= max(slack * q_coarse, floor)``."""
    return bool(q_fine <= max(slack * q_coarse, floor))


@dataclass
class RidgeSet:
    points: np.ndarray
    indices: list
    multiplicity: np.ndarray
    covectors: list

    def __len__(self):
        return len(self.indices)

    def contains_cell(self, x, h: float, cells: float = 1.0) -> bool:
        if not len(self):
            return False
        return bool(np.min(np.max(np.abs(self.points - np.asarray(x, float)), axis=-1))
                    <= cells * h + 1e-12)


def detect_multivalued(field: ValueGrid, min_count: int = 2) -> RidgeSet:
    """Nodes reached by at least ``min_count`` distinct optimal arrivals."""
    if field.multiplicity is None:
        raise InvalidInputError("field has no arrival multiplicity")
    flat = np.nonzero(field.multiplicity.reshape(-1) >= min_count)[0]
    pts = field.points().reshape(-1, field.dim)
    idx = [np.unravel_index(int(i), field.shape) for i in flat]
    cov = [[a["covector"] for a in field.arrivals.get(int(i), [])] for i in flat]
    return RidgeSet(pts[flat], idx, field.multiplicity.reshape(-1)[flat], cov)


# ---------------------------------------------------------------------------
# dynamic programming checks

def dpp_gaps(problem: ControlProblem, value: Callable, x0, control: Callable,
             checkpoints: Sequence[float], step: float = 1e-3) -> np.ndarray:
    """``V(x0) - (int_0^t L + V(x(t)))`` at each checkpoint before exit.

    The DPP says these gaps are ``<= 0`` for every control and ``= 0`` along
    optimal ones; checkpoints at or after the exit time, or where ``value``
    is not finite, yield ``nan``.
    """
    T = float(max(checkpoints))
    ts, xs, cs = simulate_trajectory(problem, x0, control, T, step)
    b = problem.target.oriented_distance(xs)
    entered = np.nonzero(b <= 0)[0]
    t_exit = ts[entered[0]] if entered.size else np.inf
    v0 = float(value(np.asarray(x0, float)))
    out = []
    for t in checkpoints:
        i = int(np.argmin(np.abs(ts - t)))
        if ts[i] >= t_exit:
            out.append(np.nan)
            continue
        vt = float(value(xs[i]))
        out.append(v0 - (cs[i] + vt) if np.isfinite(vt) else np.nan)
    return np.asarray(out)
