"""Rectangular value grids shared by the characteristic field and the oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError

PROVENANCES = ("characteristics", "grid-oracle", "external")


def parse_box(box, dim: Optional[int] = None):
    """Normalize ``box`` to ``(lo, hi)`` float arrays.

    Accepts ``((lo1, lo2), (hi1, hi2))`` or a scalar pair ``(lo, hi)`` applied
    to every axis (``dim`` required then).
    """
    lo, hi = box
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    if dim is not None:
        lo = np.broadcast_to(lo, (dim,)).copy()
        hi = np.broadcast_to(hi, (dim,)).copy()
    if lo.shape != hi.shape or np.any(hi <= lo) or not np.all(np.isfinite(lo + hi)):
        raise InvalidInputError(f"invalid box {box!r}")
    return lo, hi


def grid_shape(lo, hi, h: float):
    if not h > 0:
        raise InvalidInputError("grid spacing must be positive")
    return tuple(int(np.floor((b - a) / h + 1e-9)) + 1 for a, b in zip(lo, hi))


@dataclass
class ValueGrid:
    """Samples of ``V`` on the nodes ``lo + h * index``.

    ``values`` uses ``inf`` for unreached nodes; ``in_target`` marks nodes
    inside ``K`` (where ``V = psi``).  ``arrivals`` maps flat node indices of
    multivalued nodes to their distinct arrivals.
    """

    lo: np.ndarray
    h: float
    values: np.ndarray
    provenance: str
    in_target: Optional[np.ndarray] = None
    gradients: Optional[np.ndarray] = None
    multiplicity: Optional[np.ndarray] = None
    arrivals: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.values = np.asarray(self.values, float)
        if self.provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        if self.values.ndim != self.lo.size:
            raise InvalidInputError("values must have one axis per dimension")

    @property
    def shape(self):
        return self.values.shape

    @property
    def dim(self):
        return self.values.ndim

    @property
    def hi(self):
        return self.lo + self.h * (np.asarray(self.shape) - 1)

    @property
    def box(self):
        return self.lo.copy(), self.hi

    def axes(self):
        return [self.lo[d] + self.h * np.arange(s) for d, s in enumerate(self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, n)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def finite(self) -> np.ndarray:
        return np.isfinite(self.values)

    def nearest_index(self, x):
        x = np.asarray(x, float)
        k = np.rint((x - self.lo) / self.h).astype(int)
        return tuple(np.clip(k, 0, np.asarray(self.shape) - 1))

    def interp(self, x) -> np.ndarray:
        """Multilinear interpolation; ``inf`` if any stencil node is unreached
        or ``x`` is outside the grid."""
        x = np.asarray(x, float)
        flat = x.reshape(-1, self.dim)
        r = (flat - self.lo) / self.h
        shape = np.asarray(self.shape)
        inside = np.all((r >= -1e-9) & (r <= shape - 1 + 1e-9), axis=-1)
        i0 = np.clip(np.floor(r).astype(int), 0, shape - 2)
        w = np.clip(r - i0, 0.0, 1.0)
        out = np.zeros(len(flat))
        for corner in range(2 ** self.dim):
            bits = [(corner >> d) & 1 for d in range(self.dim)]
            idx = tuple(i0[:, d] + bits[d] for d in range(self.dim))
            wt = np.prod([w[:, d] if bits[d] else 1 - w[:, d] for d in range(self.dim)], axis=0)
            v = self.values[idx]
            # zero weights must not turn inf into nan
            out = out + np.where(wt > 0, wt * np.where(np.isfinite(v), v, 0.0), 0.0)
            out = np.where((wt > 0) & ~np.isfinite(v), np.inf, out)
        out = np.where(inside, out, np.inf)
        return out.reshape(x.shape[:-1])

    def same_layout(self, other: "ValueGrid") -> bool:
        return (self.shape == other.shape and abs(self.h - other.h) <= 1e-12 * max(1.0, self.h)
                and np.allclose(self.lo, other.lo, atol=1e-12, rtol=0))


def make_nodes(box, h: float, dim: Optional[int] = None):
    lo, hi = parse_box(box, dim)
    shape = grid_shape(lo, hi, h)
    mesh = np.meshgrid(*[lo[d] + h * np.arange(s) for d, s in enumerate(shape)], indexing="ij")
    return lo, shape, np.stack(mesh, axis=-1)
