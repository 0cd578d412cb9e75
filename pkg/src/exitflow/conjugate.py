"""Conjugate times along characteristics and local regularity certificates.

Two detectors run on a recorded :class:`Characteristic`:

* determinant kind: first zero of ``det Y(t)``, where ``Y`` carries the
  derivatives of the flow in (time, chart coordinates);
* tangent-kernel kind: first time the map ``X(t)`` started from the identity
  annihilates a boundary tangent vector, monitored through the smallest
  singular value of ``X(t) Theta``.

Both refine their events by re-integrating from the last record before the
bracket on the characteristic's own RK4 grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .characteristics import Characteristic, rk4_step
from .errors import DegenerateSeedError, InvalidInputError
from .problem import ControlProblem
from .terminal import DET_TOL

EVENT_TOL = 1e-9
BRACKET_TOL = 1e-8
ABSENT_FLOOR = 1e-6
GOLDEN_TOL = 1e-12
_GR = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class ConjugateReport:
    seed_id: int
    z: np.ndarray
    eta: np.ndarray
    kind: str
    t_c: Optional[float]
    times: np.ndarray
    series: np.ndarray
    bracket: Optional[tuple] = None
    achieved: Optional[float] = None
    witness: Optional[np.ndarray] = None
    evaluations: int = 0

    @property
    def found(self) -> bool:
        return self.t_c is not None

    def to_dict(self, include_series: bool = False) -> dict:
        d = {
            "seed": self.seed_id, "z": self.z.tolist(), "eta": self.eta.tolist(),
            "kind": self.kind, "t_c": self.t_c,
            "bracket": None if self.bracket is None else list(self.bracket),
            "achieved": self.achieved,
            "witness": None if self.witness is None else self.witness.tolist(),
            "min_abs_series": float(np.min(np.abs(self.series))) if len(self.series) else None,
        }
        if include_series:
            d["times"] = self.times.tolist()
            d["series"] = self.series.tolist()
        return d


class _Propagator:
    """Variational matrices at off-grid times, restarting from records.

    States on the characteristic's own RK4 grid after record ``j`` are cached
    on first use; a query then takes one partial step from the grid point
    below ``t``, so the result equals a re-integration from the seed.
    """

    def __init__(self, char: Characteristic, tangent: bool):
        self.char = char
        self.tangent = tangent
        self._cache = {}

    def _grid_state(self, j: int, k: int):
        char = self.char
        states = self._cache.get(j)
        if states is None:
            W, R = (char.X[j], char.P[j]) if self.tangent else (char.Y[j], char.Q[j])
            states = [(char.states[j][None], char.covectors[j][None], np.zeros(1), W[None], R[None])]
            self._cache[j] = states
        while len(states) <= k:
            nxt, _ = rk4_step(char.problem, char.flow, states[-1], np.array([char.step]))
            states.append(nxt)
        return states[k]

    def __call__(self, j: int, t: float) -> np.ndarray:
        char = self.char
        n = char.states.shape[1]
        span = float(t) - float(char.times[j])
        k = max(int(np.floor(span / char.step + 1e-9)), 0)
        rest = span - k * char.step
        state = self._grid_state(j, k)
        if abs(rest) > 1e-15:
            # rest may be a hair below zero when t sits just under a grid point
            state, _ = rk4_step(char.problem, char.flow, state, np.array([rest]))
        return state[3][0].reshape(n, -1)


def _check_ready(char, tangent):
    if tangent:
        if char.X is None:
            raise InvalidInputError("characteristic has no tangent-kernel pair; sweep with tangent=True")
    elif char.Y is None:
        raise InvalidInputError("characteristic has no variational series")
    if char.problem is None or char.flow is None:
        raise InvalidInputError("characteristic is detached from its problem")


def detect_conjugate_time(char: Characteristic, tol: float = EVENT_TOL,
                          width: float = BRACKET_TOL) -> ConjugateReport:
    """First zero of ``det Y`` on the recorded interval (determinant kind).

    Scans for a sign change or a dip to ``|det Y| <= tol``; local minima of
    ``|det Y|`` that could touch zero without crossing are screened by
    golden-section search.  Events are refined by bisection until
    ``|det Y| <= tol`` or the bracket is narrower than ``width``.

    Raises
    ------
    DegenerateSeedError
        ``det Y(0)`` vanishes.
    """
    _check_ready(char, tangent=False)
    det = char.detY
    times = char.times
    if abs(det[0]) < DET_TOL:
        raise DegenerateSeedError(f"det Y(0) = {det[0]:.3g} at seed {char.seed_id}")
    evals = 0

    prop = _Propagator(char, tangent=False)

    def det_at(j, t):
        nonlocal evals
        evals += 1
        return float(np.linalg.det(prop(j, t)))

    for i in range(1, len(times)):
        a, b = det[i - 1], det[i]
        if abs(b) <= tol:
            return ConjugateReport(char.seed_id, char.z, char.eta, "determinant", float(times[i]),
                                   times, det, (float(times[i]), float(times[i])), float(abs(b)),
                                   evaluations=evals)
        if np.sign(a) != np.sign(b):
            lo, hi, flo = float(times[i - 1]), float(times[i]), a
            mid, fm = hi, b
            while hi - lo > width:
                mid = 0.5 * (lo + hi)
                fm = det_at(i - 1, mid)
                if abs(fm) <= tol:
                    break
                if np.sign(fm) == np.sign(flo):
                    lo, flo = mid, fm
                else:
                    hi = mid
            else:
                mid = 0.5 * (lo + hi)
                fm = det_at(i - 1, mid)
            return ConjugateReport(char.seed_id, char.z, char.eta, "determinant", mid, times, det,
                                   (lo, hi), abs(fm), evaluations=evals)
        # tangential touch: local minimum of |det| within reach of zero
        if 1 <= i - 1 and i < len(times):
            c = det[i - 2]
            if abs(a) < abs(c) and abs(a) <= abs(b) and abs(a) <= max(abs(a - c), abs(b - a)):
                j0 = i - 2
                t_min, f_min, n_ev = _golden(lambda t: abs(det_at(j0, t)),
                                             float(times[i - 2]), float(times[i]))
                if f_min <= tol:
                    return ConjugateReport(char.seed_id, char.z, char.eta, "determinant", t_min,
                                           times, det, (float(times[i - 2]), float(times[i])),
                                           f_min, evaluations=evals)
    return ConjugateReport(char.seed_id, char.z, char.eta, "determinant", None, times, det,
                           evaluations=evals)


def _golden(f, lo, hi, tol=GOLDEN_TOL, max_iter=200):
    """Golden-section minimization on ``[lo, hi]``; returns ``(t, f(t), evaluations)``."""
    a, b = lo, hi
    c = b - _GR * (b - a)
    d = a + _GR * (b - a)
    fc, fd = f(c), f(d)
    ev = 2
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GR * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GR * (b - a)
            fd = f(d)
        ev += 1
    if fc < fd:
        return c, fc, ev
    return d, fd, ev


def _orthonormal(basis):
    q, _ = np.linalg.qr(np.asarray(basis, float))
    return q


def detect_conjugate_like(char: Characteristic, tangent_basis=None,
                          tol: float = EVENT_TOL) -> ConjugateReport:
    """First time ``X(t)`` annihilates a boundary tangent vector.

    Monitors ``sigma_min(X(t) Theta)`` with ``Theta`` an orthonormal tangent
    basis at the seed.  Grid minima that could reach zero (value below the
    neighboring variation) are refined by golden-section search; an event is
    reported when the refined minimum is ``<= tol``.  The witness is the
    tangent vector ``Theta v`` for the smallest right singular vector ``v``.
    """
    _check_ready(char, tangent=True)
    Theta = _orthonormal(char.tangent if tangent_basis is None else tangent_basis)
    XT = char.X @ Theta
    sig = np.linalg.svd(XT, compute_uv=False)[:, -1]
    times = char.times
    if sig[0] < DET_TOL:
        raise DegenerateSeedError(f"tangent map degenerate at seed {char.seed_id}")
    evals = 0

    prop = _Propagator(char, tangent=True)

    def sig_at(j, t):
        nonlocal evals
        evals += 1
        X = prop(j, t)
        return float(np.linalg.svd(X @ Theta, compute_uv=False)[-1])

    m = len(times)
    for k in range(1, m):
        left = sig[k - 1]
        right = sig[k + 1] if k + 1 < m else np.inf
        if not (sig[k] <= left and sig[k] <= right):
            continue
        if sig[k] <= tol:
            t_c, f_min, lo, hi = float(times[k]), float(sig[k]), float(times[k]), float(times[k])
        else:
            reach = max(abs(sig[k] - left), abs(right - sig[k]) if np.isfinite(right) else 0.0)
            if sig[k] > reach:
                continue
            lo, hi = float(times[k - 1]), float(times[min(k + 1, m - 1)])
            t_c, f_min, ev = _golden(lambda t: sig_at(k - 1, t), lo, hi)
            if f_min > tol:
                continue
        X = prop(k - 1, t_c) if t_c != times[k] else char.X[k]
        _, _, vt = np.linalg.svd(X @ Theta)
        witness = Theta @ vt[-1]
        return ConjugateReport(char.seed_id, char.z, char.eta, "tangent-kernel", t_c, times, sig,
                               (lo, hi), f_min, witness, evaluations=evals)
    return ConjugateReport(char.seed_id, char.z, char.eta, "tangent-kernel", None, times, sig,
                           evaluations=evals)


# ---------------------------------------------------------------------------
# certificates

@dataclass
class Certificate:
    granted: bool
    level: Optional[str]
    order: int
    x0: np.ndarray
    t_star: float
    reasons: list = field(default_factory=list)
    evidence: dict = field(default_factory=dict)
    caveats: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "granted": self.granted, "level": self.level, "order": self.order,
            "x0": np.asarray(self.x0).tolist(), "t_star": self.t_star,
            "reasons": list(self.reasons), "evidence": dict(self.evidence),
            "caveats": list(self.caveats),
        }


_FLAG_TEXT = {
    "boundary_c2": "target boundary of class C^2 (declared, not verified)",
    "hamiltonian_c2": "maximized Hamiltonian of class C^2 away from p = 0 (declared, not verified)",
    "unique_smooth_argmax": "unique argmax control depending smoothly on (x, p) (declared, not verified)",
}


def regularity_certificate(problem: ControlProblem, x0, char: Characteristic, order: int = 1,
                           *, t_star: Optional[float] = None, margin: float = 0.0,
                           multiplicity: Optional[int] = None,
                           proximal_margin: Optional[float] = None) -> Certificate:
    """Evidence-graded local C^1 / C^k claim for ``V`` near ``x0``.

    Parameters
    ----------
    x0 : state on ``char`` at time ``t_star``.  When ``t_star`` is omitted the
        nearest record is used and must lie within ``1e-6`` of ``x0``.
    order : requested k; a C^k claim needs ``problem.flags.data_order >= k``.
    margin : conjugate-like times ``t_c <= t_star + margin`` refuse the
        certificate (a resolution allowance).  The comparison always adds
        ``BRACKET_TOL``, the time resolution of the event search.
    multiplicity : number of distinct arrivals at ``x0`` from a field, if known.
    proximal_margin : result of a proximal-subdifferential probe at ``x0``.

    A refused certificate is a normal result, never an exception.
    """
    x0 = np.asarray(x0, float)
    flags = problem.flags
    if t_star is None:
        d = np.linalg.norm(char.states - x0, axis=-1)
        i = int(np.argmin(d))
        if d[i] > 1e-6:
            raise InvalidInputError(f"x0 is {d[i]:.3g} away from the characteristic; pass t_star")
        t_star = float(char.times[i])
    t_star = float(t_star)
    reasons, caveats, evidence = [], [], {}

    if not flags.hamiltonian_c2:
        reasons.append("Hamiltonian not declared C^2 (nonsmooth or only C^{1,1}); "
                       "the regularity hypotheses fail")
    if multiplicity is not None and multiplicity >= 2:
        reasons.append(f"multivalued arrival: {multiplicity} distinct optimal covectors reach x0")

    like = None
    det = None
    if char.X is not None and flags.hamiltonian_c2:
        like = detect_conjugate_like(char)
        evidence["conjugate_like"] = like.to_dict()
        if like.found and like.t_c <= t_star + margin + BRACKET_TOL:
            reasons.append(f"conjugate-like time t_c={like.t_c:.9g} <= t*={t_star:.9g}"
                           + (f" + margin {margin:.3g}" if margin else ""))
    elif char.X is None:
        reasons.append("no tangent-kernel data on the characteristic")
    if char.Y is not None and flags.hamiltonian_c2:
        det = detect_conjugate_time(char)
        evidence["determinant"] = det.to_dict()

    granted = not reasons
    level = "C1" if granted else None
    if granted and order >= 2:
        ck_ok = (flags.data_order >= order and flags.unique_smooth_argmax
                 and det is not None and not (det.found and det.t_c <= t_star + margin + BRACKET_TOL))
        if ck_ok:
            level = f"C{order}"
        else:
            caveats.append(f"C^{order} not claimed: needs declared data order >= {order}, "
                           "a smooth unique argmax and no determinant conjugate time on [0, t*]")

    if multiplicity is None:
        caveats.append("differentiability of V at x0 assumed, not evidenced")
    for name, text in _FLAG_TEXT.items():
        if getattr(flags, name):
            caveats.append(text)
    if proximal_margin is not None:
        evidence["proximal_margin"] = float(proximal_margin)
        structure = flags.hpp_positive or (flags.hpp_kernel_dim_one and flags.state_only_cost)
        if proximal_margin >= 0 and structure:
            evidence["proximal_path"] = ("proximal probe passes at x0 and H_pp has the declared "
                                         "structure; local regularity also follows from a "
                                         "nonempty proximal subdifferential")
    evidence["t_star"] = t_star
    evidence["margin"] = float(margin)
    return Certificate(granted, level, int(order), x0, t_star, reasons, evidence, caveats)
