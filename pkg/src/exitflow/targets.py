"""Target sets, oriented distance functions and boundary charts.

Sign convention: ``b_K < 0`` inside the target, ``> 0`` outside, and the
gradient of ``b_K`` on the boundary is the unit normal pointing out of ``K``
(into the region where trajectories live).  All functions accept batched
points of shape ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, NonsmoothPointError, OutOfChartError

# points closer than this to a skeleton/corner have no classical gradient
SKELETON_TOL = 1e-9


@dataclass(frozen=True)
class BoundaryChart:
    """Local parameterization ``eta -> z`` of a piece of the target boundary.

    ``param`` maps chart coordinates of shape ``(..., n-1)`` to boundary points
    ``(..., n)`` and ``tangent`` returns the columns ``dz/deta`` with shape
    ``(..., n, n-1)``.  The domain is the closed box ``[lo, hi]``.
    """

    param: Callable[[np.ndarray], np.ndarray]
    tangent: Callable[[np.ndarray], np.ndarray]
    lo: np.ndarray
    hi: np.ndarray
    label: str = ""

    @property
    def dim(self) -> int:
        return int(np.size(self.lo))

    def contains(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        return np.all((eta >= self.lo - 1e-12) & (eta <= self.hi + 1e-12), axis=-1)

    def length(self, samples: int = 257) -> float:
        """Arclength (n=2) or a rectangle-rule area estimate of the chart image."""
        if self.dim != 1:
            grids = np.meshgrid(*[np.linspace(a, b, 33) for a, b in zip(self.lo, self.hi)],
                                indexing="ij")
            eta = np.stack([g.ravel() for g in grids], axis=-1)
            t = self.tangent(eta)
            vol = np.sqrt(np.abs(np.linalg.det(np.swapaxes(t, -1, -2) @ t)))
            return float(vol.mean() * np.prod(np.asarray(self.hi) - np.asarray(self.lo)))
        eta = np.linspace(self.lo[0], self.hi[0], samples)[:, None]
        speed = np.linalg.norm(self.tangent(eta)[..., 0], axis=-1)
        return float(np.trapezoid(speed, eta[:, 0]))


def chart_point(chart: BoundaryChart, eta) -> tuple[np.ndarray, np.ndarray]:
    """Boundary point and tangent columns at chart coordinates ``eta``."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if eta.shape[-1] != chart.dim:
        raise InvalidInputError(f"chart coordinates must have length {chart.dim}")
    if not np.all(chart.contains(eta)):
        raise OutOfChartError(f"eta={eta} outside chart domain [{chart.lo}, {chart.hi}]")
    return chart.param(eta), chart.tangent(eta)


def circle_chart(center, radius: float, start: float = 0.0, stop: float = 2 * np.pi,
                 label: str = "circle") -> BoundaryChart:
    c = np.asarray(center, dtype=float)

    def param(eta):
        a = np.asarray(eta, dtype=float)[..., 0]
        return c + radius * np.stack([np.cos(a), np.sin(a)], axis=-1)

    def tangent(eta):
        a = np.asarray(eta, dtype=float)[..., 0]
        return (radius * np.stack([-np.sin(a), np.cos(a)], axis=-1))[..., None]

    return BoundaryChart(param, tangent, np.array([start]), np.array([stop]), label)


def segment_chart(a, b, label: str = "segment") -> BoundaryChart:
    """Arclength chart of the segment from ``a`` to ``b`` (any dimension n=2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    d = (b - a) / length

    def param(eta):
        s = np.asarray(eta, dtype=float)[..., :1]
        return a + s * d

    def tangent(eta):
        s = np.asarray(eta, dtype=float)[..., 0]
        return np.broadcast_to(d[:, None], s.shape + (2, 1)).copy()

    return BoundaryChart(param, tangent, np.array([0.0]), np.array([length]), label)


class TargetSet:
    """Closed target set with an oriented distance function."""

    kind = "implicit-function"
    dim = 2

    def oriented_distance(self, x) -> np.ndarray:
        raise NotImplementedError

    def distance_gradient(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of ``b_K`` and a boolean mask of points where it exists."""
        raise NotImplementedError

    def contains(self, x) -> np.ndarray:
        return self.oriented_distance(x) <= 0.0

    def normal(self, z) -> np.ndarray:
        g, ok = self.distance_gradient(z)
        if not np.all(ok):
            raise NonsmoothPointError("boundary normal undefined at a corner")
        return g

    def charts(self) -> list[BoundaryChart]:
        return []


class Disk(TargetSet):
    kind = "disk"

    def __init__(self, center=(0.0, 0.0), radius: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.dim = self.center.size

    def oriented_distance(self, x):
        return np.linalg.norm(np.asarray(x, float) - self.center, axis=-1) - self.radius

    def distance_gradient(self, x):
        d = np.asarray(x, float) - self.center
        r = np.linalg.norm(d, axis=-1)
        ok = r > SKELETON_TOL
        return d / np.where(ok, r, 1.0)[..., None], ok

    def charts(self):
        return [circle_chart(self.center, self.radius, label="circle")]


class DiskComplement(Disk):
    """K = {|x - c| >= r}; trajectories live inside the open disk."""

    kind = "disk-complement"

    def oriented_distance(self, x):
        return -super().oriented_distance(x)

    def distance_gradient(self, x):
        g, ok = super().distance_gradient(x)
        return -g, ok


class Capsule(TargetSet):
    """Points within ``radius`` of the segment [a, b] (a stadium in 2-D)."""

    kind = "capsule"

    def __init__(self, a, b, radius: float):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.radius = float(radius)
        self.dim = self.a.size

    def _offset(self, x):
        x = np.asarray(x, float)
        ab = self.b - self.a
        s = np.clip(((x - self.a) @ ab) / (ab @ ab), 0.0, 1.0)
        return x - (self.a + s[..., None] * ab)

    def oriented_distance(self, x):
        return np.linalg.norm(self._offset(x), axis=-1) - self.radius

    def distance_gradient(self, x):
        d = self._offset(x)
        r = np.linalg.norm(d, axis=-1)
        ok = r > SKELETON_TOL
        return d / np.where(ok, r, 1.0)[..., None], ok

    def charts(self):
        if self.dim != 2:
            return []
        ab = self.b - self.a
        u = ab / np.linalg.norm(ab)
        nrm = np.array([u[1], -u[0]])  # right-hand normal of a->b
        r = self.radius
        base = np.arctan2(nrm[1], nrm[0])
        return [
            segment_chart(self.a + r * nrm, self.b + r * nrm, label="side+"),
            circle_chart(self.b, r, base, base + np.pi, label="cap-b"),
            segment_chart(self.b - r * nrm, self.a - r * nrm, label="side-"),
            circle_chart(self.a, r, base + np.pi, base + 2 * np.pi, label="cap-a"),
        ]


class PolygonComplement(TargetSet):
    """K = R^2 minus an open convex polygon; trajectories live in the polygon.

    ``vertices`` are listed counter-clockwise.
    """

    kind = "half-plane-intersection"

    def __init__(self, vertices: Sequence[Sequence[float]]):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise InvalidInputError("polygon needs at least three 2-D vertices")
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 <= 0:
            raise InvalidInputError("polygon vertices must be counter-clockwise")
        self.vertices = v
        self.dim = 2
        e = np.roll(v, -1, axis=0) - v
        self.edges = e
        # inward normals of the polygon = outward normals of K
        inward = np.stack([-e[:, 1], e[:, 0]], axis=-1)
        self.inward = inward / np.linalg.norm(inward, axis=-1, keepdims=True)
        self.offsets = np.sum(self.inward * v, axis=-1)

    def face_distances(self, x):
        """Signed distance to each edge line, positive inside the polygon."""
        x = np.asarray(x, float)
        return x @ self.inward.T - self.offsets

    def _outside(self, x):
        # nearest boundary point via point-to-segment projection
        x = np.asarray(x, float)
        d = x[..., None, :] - self.vertices
        s = np.clip(np.sum(d * self.edges, -1) / np.sum(self.edges ** 2, -1), 0.0, 1.0)
        proj = self.vertices + s[..., None] * self.edges
        dist = np.linalg.norm(x[..., None, :] - proj, axis=-1)
        k = np.argmin(dist, axis=-1)
        pk = np.take_along_axis(proj, k[..., None, None], axis=-2)[..., 0, :]
        return np.min(dist, axis=-1), pk

    def oriented_distance(self, x):
        fd = self.face_distances(x)
        inside = np.min(fd, axis=-1)
        out, _ = self._outside(x)
        return np.where(inside > 0, inside, -out)

    def distance_gradient(self, x):
        x = np.asarray(x, float)
        fd = self.face_distances(x)
        order = np.sort(fd, axis=-1)
        k = np.argmin(fd, axis=-1)
        g_in = self.inward[k]
        ok_in = (order[..., 1] - order[..., 0]) > SKELETON_TOL
        out, pk = self._outside(x)
        diff = x - pk
        g_out = -diff / np.where(out > SKELETON_TOL, out, 1.0)[..., None]
        inside = order[..., 0] > SKELETON_TOL
        on_bdry = ~inside & (out <= SKELETON_TOL)
        # on an open edge the gradient is the edge normal; corners have none
        near_vertex = np.min(np.linalg.norm(x[..., None, :] - self.vertices, axis=-1), axis=-1)
        ok_on = near_vertex > SKELETON_TOL
        g = np.where(inside[..., None], g_in, np.where(on_bdry[..., None], g_in, g_out))
        ok = np.where(inside, ok_in, np.where(on_bdry, ok_on, True))
        return g, ok

    def charts(self):
        v = self.vertices
        return [segment_chart(v[i], v[(i + 1) % len(v)], label=f"face{i}") for i in range(len(v))]


class ImplicitTarget(TargetSet):
    """Target given by user callables for ``b_K`` and its gradient."""

    def __init__(self, distance: Callable, gradient: Callable, charts: Sequence[BoundaryChart] = (),
                 dim: int = 2):
        self._distance = distance
        self._gradient = gradient
        self._charts = list(charts)
        self.dim = dim

    def oriented_distance(self, x):
        return np.asarray(self._distance(np.asarray(x, float)), dtype=float)

    def distance_gradient(self, x):
        g = np.asarray(self._gradient(np.asarray(x, float)), dtype=float)
        return g, np.all(np.isfinite(g), axis=-1)

    def charts(self):
        return list(self._charts)


def oriented_distance(target: TargetSet, x, with_gradient: bool = True):
    """Oriented distance ``b_K(x)`` and, optionally, its gradient.

    Raises NonsmoothPointError when the gradient is requested at a skeleton
    or corner point.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite point")
    b = target.oriented_distance(x)
    if not with_gradient:
        return b
    g, ok = target.distance_gradient(x)
    if not np.all(ok):
        raise NonsmoothPointError(f"b_K is not differentiable at {x}")
    return b, g


@dataclass
class SeedLayout:
    """Boundary seed coordinates grouped by chart."""

    chart_index: np.ndarray
    eta: np.ndarray
    charts: list = field(default_factory=list)

    def __len__(self):
        return len(self.chart_index)


def boundary_seeds(target: TargetSet, count: int) -> SeedLayout:
    """Spread ``count`` seeds over the target's charts proportionally to length.

    Seeds sit at midpoints of equal subdivisions, so chart endpoints (corners
    of polygonal targets) are never seeded.
    """
    if count < 1:
        raise InvalidInputError("seed count must be >= 1")
    charts = target.charts()
    if not charts:
        raise InvalidInputError("target has no boundary charts")
    if charts[0].dim != 1:
        raise InvalidInputError("automatic seeding supports 1-D charts only")
    lengths = np.array([c.length() for c in charts])
    share = lengths / lengths.sum() * count
    per = np.floor(share).astype(int)
    # largest remainders get the leftovers, ties by chart order
    rest = count - per.sum()
    if rest > 0:
        per[np.argsort(-(share - per), kind="stable")[:rest]] += 1
    idx, etas = [], []
    for i, (c, k) in enumerate(zip(charts, per)):
        if k == 0:
            continue
        lo, hi = float(c.lo[0]), float(c.hi[0])
        etas.append(lo + (np.arange(k) + 0.5) * (hi - lo) / k)
        idx.append(np.full(k, i))
    return SeedLayout(np.concatenate(idx), np.concatenate(etas)[:, None], charts)
