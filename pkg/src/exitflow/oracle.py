"""Semi-Lagrangian value iteration for the exit-time HJB equation.

The discrete dynamic programming principle

    V(x) = min_u { D L(x, u) + V(x + D f(x, u)) },   D = h / N,

is solved by Gauss-Seidel sweeps in alternating node orderings, with
multilinear interpolation at the foot points.  When a foot point's stencil
contains the node itself, the node equation is solved exactly for that
node.  Nodes inside the target are frozen at ``psi``; controls whose foot
point leaves the box are discarded.
"""

from __future__ import annotations

import itertools

import numba
import numpy as np

from .errors import InvalidInputError, IterationLimitError
from .grid import ValueGrid, make_nodes
from .problem import ControlProblem

BIG = 1e30      # unreached sentinel inside the kernel
SKIP = 1e300    # cost marking a discarded control


@numba.njit(cache=True)
def _gauss_seidel(V, cost, disp, frozen, order, lo, h, shape, strides):
    n = lo.shape[0]
    m = cost.shape[1]
    ncorner = 1 << n
    i0 = np.empty(n, np.int64)
    w = np.empty(n)
    change = 0.0
    newly = 0
    for ii in range(order.shape[0]):
        i = order[ii]
        if frozen[i]:
            continue
        best = SKIP
        for j in range(m):
            c = cost[i, j]
            if c >= 1e299:
                continue
            # node multi-index from the flat C-order index
            rem = i
            for d in range(n):
                k = rem // strides[d]
                rem -= k * strides[d]
                r = k + disp[i, j, d] / h
                f = np.floor(r)
                if f < 0.0:
                    f = 0.0
                if f > shape[d] - 2:
                    f = shape[d] - 2
                i0[d] = np.int64(f)
                w[d] = r - f
            acc = 0.0
            wself = 0.0
            for corner in range(ncorner):
                wt = 1.0
                flat = 0
                for d in range(n):
                    if (corner >> d) & 1:
                        wt *= w[d]
                        flat += (i0[d] + 1) * strides[d]
                    else:
                        wt *= 1.0 - w[d]
                        flat += i0[d] * strides[d]
                if wt == 0.0:
                    continue
                if flat == i:
                    wself += wt
                else:
                    acc += wt * V[flat]
            if wself >= 1.0 - 1e-14:
                continue
            val = (c + acc) / (1.0 - wself)
            if val < best:
                best = val
        if best > BIG:
            best = BIG
        old = V[i]
        if best < old:
            if old >= 0.5 * BIG and best < 0.5 * BIG:
                newly += 1
            elif old < 0.5 * BIG and old - best > change:
                change = old - best
            V[i] = best
    return change, newly


def solve_grid(problem: ControlProblem, box, h: float, controls: int = 64, tol: float = 1e-9,
               max_sweeps: int = 100_000) -> ValueGrid:
    """Independent grid solution of the HJB equation on ``box``.

    Parameters
    ----------
    controls : int
        Size ``m`` of the control sample passed to the problem's sampler.
    tol : float
        Stop once a full sweep changes no finite value by more than ``tol``
        and reaches no new node.

    Raises
    ------
    IterationLimitError
        No convergence within ``max_sweeps`` sweeps (``.residual`` holds the
        last sup-norm change).
    """
    if controls < 8:
        raise InvalidInputError("the oracle needs at least 8 controls")
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    n = problem.dim_state
    lo, shape, pts = make_nodes(box, h, n)
    if min(shape) < 2:
        raise InvalidInputError("grid needs at least two nodes per axis")
    hi = lo + h * (np.asarray(shape) - 1)
    P = pts.reshape(-1, n)
    U = np.asarray(problem.control_sampler(controls), float)
    U = U.reshape(len(U), -1)
    f = problem.dynamics(P[:, None, :], U[None, :, :])
    speed = float(np.max(np.linalg.norm(f, axis=-1)))
    if speed <= 0:
        raise InvalidInputError("dynamics vanish on the whole grid")
    dt = h / speed
    disp = dt * f
    cost = dt * problem.running_cost(P[:, None, :], U[None, :, :])
    foot = P[:, None, :] + disp
    outside = np.any((foot < lo - 1e-12) | (foot > hi + 1e-12), axis=-1)
    cost = np.where(outside, SKIP, cost)

    inK = problem.target.contains(P)
    V = np.where(inK, np.asarray(problem.terminal_cost(P), float), BIG)
    strides = np.array([int(np.prod(shape[d + 1:])) for d in range(n)], dtype=np.int64)
    flat = np.arange(P.shape[0]).reshape(shape)
    orders = []
    for flips in itertools.product((False, True), repeat=n):
        a = flat
        for d, fl in enumerate(flips):
            if fl:
                a = np.flip(a, axis=d)
        orders.append(np.ascontiguousarray(a.ravel()))

    shape_arr = np.asarray(shape, dtype=np.int64)
    cost = np.ascontiguousarray(cost)
    disp = np.ascontiguousarray(disp)
    change = np.inf
    for it in range(max_sweeps):
        change, newly = _gauss_seidel(V, cost, disp, inK, orders[it % len(orders)], lo,
                                      float(h), shape_arr, strides)
        if change <= tol and newly == 0:
            break
    else:
        raise IterationLimitError(f"no convergence after {max_sweeps} sweeps "
                                  f"(last change {change:.3g})", residual=float(change))
    values = np.where(V >= 0.5 * BIG, np.inf, V).reshape(shape)
    meta = {"controls": int(len(U)), "time_step": dt, "speed_bound": speed,
            "sweeps": it + 1, "residual": float(change), "tol": tol}
    return ValueGrid(lo, float(h), values, "grid-oracle", in_target=inK.reshape(shape),
                     meta=meta)
