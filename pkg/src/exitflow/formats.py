"""Plain-text artifacts: value grids, characteristic paths and reports.

JSON files hold metadata plus flat C-order arrays.  Non-finite numbers are
written as ``null`` (``+inf`` for grid values, ``nan`` for gradients), and
floats go through ``repr`` so the JSON grid round trip is bit-exact.  CSV
floats use 17 significant digits.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .grid import ValueGrid

GRID_FORMAT = "exitflow.value-grid"
FORMAT_VERSION = 1


def plain(obj):
    """Recursively convert numpy containers and scalars to JSON-ready types."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, trailing newline)."""
    return json.dumps(plain(obj), sort_keys=True, allow_nan=False) + "\n"


def _stamp(meta: dict, timestamp: bool) -> dict:
    meta = dict(meta)
    if timestamp:
        meta["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    else:
        meta.pop("created", None)
    return meta


def _nullable(a):
    return [float(v) if np.isfinite(v) else None for v in np.asarray(a, float).ravel()]


# ---------------------------------------------------------------------------
# value grids

def grid_to_dict(grid: ValueGrid, timestamp: bool = False) -> dict:
    d = {
        "format": GRID_FORMAT,
        "version": FORMAT_VERSION,
        "provenance": grid.provenance,
        "lo": [float(v) for v in grid.lo],
        "h": float(grid.h),
        "shape": [int(s) for s in grid.shape],
        "values": _nullable(grid.values),
        "in_target": None if grid.in_target is None
        else [bool(v) for v in np.asarray(grid.in_target).ravel()],
        "multiplicity": None if grid.multiplicity is None
        else [int(v) for v in np.asarray(grid.multiplicity).ravel()],
        "gradients": None if grid.gradients is None else _nullable(grid.gradients),
        "arrivals": {str(k): v for k, v in sorted(grid.arrivals.items())},
        "meta": _stamp(grid.meta, timestamp),
    }
    return d


def grid_from_dict(d: dict) -> ValueGrid:
    if d.get("format") != GRID_FORMAT:
        raise InvalidInputError("not a value-grid document")
    shape = tuple(int(s) for s in d["shape"])
    n = len(shape)
    vals = np.array([np.inf if v is None else v for v in d["values"]], float).reshape(shape)
    in_target = None if d.get("in_target") is None else np.array(d["in_target"], bool).reshape(shape)
    mult = None if d.get("multiplicity") is None else np.array(d["multiplicity"], int).reshape(shape)
    grads = None
    if d.get("gradients") is not None:
        grads = np.array([np.nan if v is None else v for v in d["gradients"]],
                         float).reshape(shape + (n,))
    arrivals = {int(k): v for k, v in d.get("arrivals", {}).items()}
    return ValueGrid(np.array(d["lo"], float), float(d["h"]), vals, d["provenance"],
                     in_target=in_target, gradients=grads, multiplicity=mult,
                     arrivals=arrivals, meta=dict(d.get("meta", {})))


def write_grid_json(grid: ValueGrid, path, timestamp: bool = False) -> None:
    Path(path).write_text(dumps(grid_to_dict(grid, timestamp)))


def read_grid_json(path) -> ValueGrid:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})") from None
    return grid_from_dict(d)


def _fmt(x) -> str:
    return "%.17g" % x


def grid_csv_text(grid: ValueGrid) -> str:
    """Rows ``x1..xn, value, multiplicity`` in C order; ``inf`` for unreached."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = grid.dim
    w.writerow([f"x{i + 1}" for i in range(n)] + ["value", "multiplicity"])
    pts = grid.points().reshape(-1, n)
    vals = grid.values.ravel()
    mult = np.zeros(vals.size, int) if grid.multiplicity is None else grid.multiplicity.ravel()
    for x, v, m in zip(pts, vals, mult):
        w.writerow([_fmt(c) for c in x] + [_fmt(v), int(m)])
    return buf.getvalue()


def write_grid_csv(grid: ValueGrid, path) -> None:
    Path(path).write_text(grid_csv_text(grid))


def read_grid_csv(path, provenance: str = "external") -> ValueGrid:
    """Rebuild a grid from its CSV form (node coordinates fix ``lo``, ``h``)."""
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if len(rows) < 2:
        raise InvalidInputError(f"{path}: no data rows")
    head = rows[0]
    n = len(head) - 2
    if n < 1 or head[-2:] != ["value", "multiplicity"]:
        raise InvalidInputError(f"{path}: unexpected header {head}")
    data = np.array([[float(c) for c in r[:-1]] for r in rows[1:]], float)
    mult = np.array([int(r[-1]) for r in rows[1:]], int)
    axes = [np.unique(data[:, d]) for d in range(n)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != len(data):
        raise InvalidInputError(f"{path}: rows do not form a full grid")
    lo = np.array([a[0] for a in axes])
    steps = [np.diff(a) for a in axes if len(a) > 1]
    if not steps:
        raise InvalidInputError(f"{path}: need two nodes along some axis")
    h = float(np.median(np.concatenate(steps)))
    return ValueGrid(lo, h, data[:, n].reshape(shape), provenance,
                     multiplicity=mult.reshape(shape))


def read_grid(path) -> ValueGrid:
    """Load a grid from ``.json`` or ``.csv`` by extension."""
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"{path}: no such file")
    if p.suffix.lower() == ".csv":
        return read_grid_csv(p)
    return read_grid_json(p)


# ---------------------------------------------------------------------------
# characteristics and reports

def characteristics_csv_text(chars) -> str:
    """Rows ``seed, branch, t, x.., p.., cost, detY, stop_reason``.

    ``branch`` numbers the fixed-control selections integrated from one seed
    (0 for the plain characteristic); ``detY`` is ``nan`` without variational
    data.
    """
    chars = list(chars)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = chars[0].states.shape[1] if chars else 2
    w.writerow(["seed", "branch", "t"] + [f"x{i + 1}" for i in range(n)]
               + [f"p{i + 1}" for i in range(n)] + ["cost", "detY", "stop_reason"])
    branch = {}
    for c in chars:
        b = branch.get(c.seed_id, 0)
        branch[c.seed_id] = b + 1
        det = c.detY if c.Y is not None else np.full(len(c), np.nan)
        for i in range(len(c)):
            w.writerow([c.seed_id, b, _fmt(c.times[i])] + [_fmt(v) for v in c.states[i]]
                       + [_fmt(v) for v in c.covectors[i]]
                       + [_fmt(c.cost[i]), _fmt(det[i]), c.stop_reason])
    return buf.getvalue()


def write_characteristics_csv(chars, path) -> None:
    Path(path).write_text(characteristics_csv_text(chars))


def read_characteristics_csv(path) -> dict:
    """Columns of a characteristics CSV as arrays (``stop_reason`` as strings)."""
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    head, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(head):
        col = [r[j] for r in body]
        if name == "stop_reason":
            out[name] = np.array(col, dtype=object)
        elif name in ("seed", "branch"):
            out[name] = np.array(col, int)
        else:
            out[name] = np.array(col, float)
    return out


def write_json(obj, path, timestamp: bool = False) -> None:
    """Write a report document; adds ``meta.created`` when ``timestamp``."""
    obj = dict(obj)
    obj["meta"] = _stamp(obj.get("meta", {}), timestamp)
    Path(path).write_text(dumps(obj))
