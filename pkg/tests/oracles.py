"""Independent reference values for the test suite.

Nothing here imports ``exitflow``: every function is a closed form, a
brute-force search or a plain finite difference written from the problem
statements alone, so agreement with the package is evidence rather than
self-consistency.
"""

from __future__ import annotations

import numpy as np

SQRT13 = np.sqrt(13.0)
EX1_VERTICES = np.array([(1.0, 0.0), (4.0, -2.0), (7.0, 0.0), (4.0, 2.0)])


# ---------------------------------------------------------------------------
# closed-form value functions

def disk_value(x, radius=1.0):
    """Minimum time to the disk ``|x| <= radius`` at unit speed."""
    return np.linalg.norm(np.asarray(x, float), axis=-1) - radius


def focus_value(x):
    """Minimum time to leave the unit disk at unit speed."""
    return 1.0 - np.linalg.norm(np.asarray(x, float), axis=-1)


def ex1_value(y):
    """Minimum time for ``y1' = u``, ``|u| <= 1`` to reach the complement of the rhombus."""
    y = np.asarray(y, float)
    y1, y2 = y[..., 0], np.abs(y[..., 1])
    return np.where(y1 <= 4.0, y1 - 1.5 * y2 - 1.0, -y1 - 1.5 * y2 + 7.0)


def ex1_gradient(y):
    """Gradient of :func:`ex1_value` off its ridges."""
    y = np.asarray(y, float)
    s1 = np.where(y[..., 0] < 4.0, 1.0, -1.0)
    return np.stack([s1, -1.5 * np.sign(y[..., 1])], -1)


def segment_distance(x, a, b):
    x, a, b = (np.asarray(v, float) for v in (x, a, b))
    d = b - a
    s = np.clip(np.sum((x - a) * d, -1) / np.dot(d, d), 0.0, 1.0)
    return np.linalg.norm(x - (a + s[..., None] * d), axis=-1)


def polygon_boundary_distance(x, vertices=EX1_VERTICES):
    """Unsigned distance to the boundary of a closed polygon."""
    v = np.asarray(vertices, float)
    return np.min([segment_distance(x, v[i], v[(i + 1) % len(v)]) for i in range(len(v))], axis=0)


# ---------------------------------------------------------------------------
# characteristics

def radial_characteristic(eta, t, outward=True):
    """Eikonal characteristic from the unit-circle point at angle ``eta``.

    Returns ``(y, q, Y, Q)`` with columns ordered (time, eta).  ``outward``
    selects the disk target (front expands); otherwise the target is the
    complement of the disk and the front focuses at the origin at ``t = 1``.
    """
    s = 1.0 if outward else -1.0
    z = np.array([np.cos(eta), np.sin(eta)])
    tau = np.array([-np.sin(eta), np.cos(eta)])
    y = (1.0 + s * t) * z
    q = s * z
    Y = np.column_stack([s * z, (1.0 + s * t) * tau])
    Q = np.column_stack([np.zeros(2), s * tau])
    return y, q, Y, Q


def saddle_characteristic(t):
    """Characteristic of ``x' = diag(1,-1) x + u``, ``|u| <= 1``, ``L = 1`` from ``(1/2, 0)``.

    ``mu = 2`` solves ``-mu/2 + mu - 1 = 0``; then ``q1' = q1`` and
    ``y1' = -y1 + 1``.
    """
    t = np.asarray(t, float)
    y = np.stack([1.0 - 0.5 * np.exp(-t), np.zeros_like(t)], -1)
    q = np.stack([2.0 * np.exp(t), np.zeros_like(t)], -1)
    return y, q


def linear_adjoint(diag_m, p_tau, t, tau):
    """``p(t) = exp(-M^T (t - tau)) p(tau)`` for diagonal ``M``.

    Solution of ``p' = -M^T p`` (the adjoint of ``x' = M x + u`` with
    ``L`` independent of ``x``).
    """
    m = np.asarray(diag_m, float)
    t = np.asarray(t, float)[..., None]
    return np.exp(-m * (t - tau)) * np.asarray(p_tau, float)


# ---------------------------------------------------------------------------
# brute force

def capsule_distance(x, a=(-2.0, -4.0), b=(-2.0, 4.0), radius=2.0):
    return segment_distance(x, a, b) - radius


def constant_control_exit_time(x0, u, T=6.0, dt=1e-3):
    """First ``t`` with ``x0 + t u`` inside the capsule, refined by bisection."""
    x0, u = np.asarray(x0, float), np.asarray(u, float)
    ts = np.arange(0.0, T + dt, dt)
    b = capsule_distance(x0 + ts[:, None] * u)
    hit = np.nonzero(b <= 0)[0]
    if hit.size == 0:
        return np.inf
    k = hit[0]
    if k == 0:
        return 0.0
    lo, hi = ts[k - 1], ts[k]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if capsule_distance(x0 + mid * u) <= 0:
            hi = mid
        else:
            lo = mid
    return hi


def ex2_brute_force_value(x0, per_axis=41):
    """Minimum over a grid of constant box controls of the capsule exit time."""
    g = np.linspace(-1.0, 1.0, per_axis)
    best = np.inf
    for a in g:
        for b in g:
            if max(abs(a), abs(b)) < 1.0:
                continue  # interior controls are never faster at unit cost
            best = min(best, constant_control_exit_time(x0, (a, b)))
    return best


def central_difference(fn, x, step=1e-5):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g
