"""Piecewise-constant cadlag paths on finite grids and path surgery.

A :class:`GridPath` equals ``values[k]`` on ``[times[k], times[k+1])``.
Nodes listed in ``jump_idx`` carry a genuine jump; for those the value just
before the node is stored in ``pre``. Unmarked nodes are treated as points
of continuity, so the left limit there is the node value itself.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "GridMismatchError",
    "GridPath",
    "TimedPath",
    "stop",
    "stop_pre",
    "bump",
    "concat",
    "dist_star",
    "restrict",
    "continuous_part",
    "remove_jump",
    "to_csv",
    "from_csv",
]

# relative tolerance used when matching a time against grid nodes
GRID_RTOL = 1e-12


class GridMismatchError(ValueError):
    """Raised when a time does not coincide with a grid node."""


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class GridPath:
    """Cadlag path sampled on a strictly increasing grid with explicit jumps.

    Parameters
    ----------
    times : array_like, shape (N+1,)
        Grid with ``times[0] == 0``.
    values : array_like, shape (N+1,) or (N+1, d)
        Node values.
    jump_idx : sequence of int, optional
        Indices ``0 < k <= N`` where the path jumps.
    pre : array_like, shape (len(jump_idx), d), optional
        Pre-jump values ``x(t_k-)`` for the marked nodes.
    """

    __slots__ = ("times", "values", "jump_idx", "pre", "_fp")

    def __init__(self, times, values, jump_idx=None, pre=None):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 1:
            raise ValueError("times must be a non-empty 1-d array")
        if values.shape[0] != times.size:
            raise ValueError("values and times have different lengths")
        if times[0] != 0.0:
            raise ValueError("times[0] must be 0")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        if jump_idx is None or len(jump_idx) == 0:
            jidx = np.zeros(0, dtype=np.int64)
            jpre = np.zeros((0, values.shape[1]))
        else:
            jidx = np.asarray(jump_idx, dtype=np.int64)
            jpre = np.asarray(pre, dtype=float).reshape(jidx.size, values.shape[1])
            order = np.argsort(jidx, kind="stable")
            jidx, jpre = jidx[order], jpre[order]
            if np.any(np.diff(jidx) <= 0):
                raise ValueError("duplicate jump indices")
            if jidx[0] <= 0 or jidx[-1] >= times.size:
                raise ValueError("jump indices must satisfy 0 < k <= N")
        self.times = _frozen(times)
        self.values = _frozen(values)
        self.jump_idx = np.array(jidx, dtype=np.int64)
        self.jump_idx.setflags(write=False)
        self.pre = _frozen(jpre)
        self._fp = None

    # basic attributes
    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        """Number of grid intervals."""
        return self.times.size - 1

    def __len__(self):
        return self.times.size

    def __repr__(self):
        return (f"GridPath(n={self.n}, d={self.d}, T={self.T!r}, "
                f"jumps={self.jump_idx.size})")

    def __eq__(self, other):
        if not isinstance(other, GridPath):
            return NotImplemented
        return (np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.jump_idx, other.jump_idx)
                and np.array_equal(self.pre, other.pre))

    __hash__ = None

    def fingerprint(self) -> str:
        """Content hash of grid, values and jump marks."""
        if self._fp is None:
            h = hashlib.sha256()
            for a in (self.times, self.values, self.jump_idx, self.pre):
                h.update(np.ascontiguousarray(a).tobytes())
                h.update(b"|")
            self._fp = h.hexdigest()
        return self._fp

    # grid lookup
    def index(self, t: float) -> int:
        """Index of the grid node equal to ``t``; raises if off-grid."""
        k, dist = self.snap(t)
        if dist > GRID_RTOL * max(1.0, abs(self.T)):
            raise GridMismatchError(f"time {t!r} is not a grid node")
        return k

    def snap(self, t: float):
        """Nearest grid node and its distance to ``t``."""
        k = int(np.searchsorted(self.times, t))
        if k >= self.times.size:
            k = self.times.size - 1
        elif k > 0 and abs(self.times[k - 1] - t) <= abs(self.times[k] - t):
            k -= 1
        return k, float(abs(self.times[k] - t))

    def is_jump(self, k: int) -> bool:
        return bool(np.any(self.jump_idx == k))

    def left_limit(self, k: int) -> np.ndarray:
        """``x(t_k-)``: the stored pre-jump value on marked nodes, else ``x(t_k)``."""
        pos = np.searchsorted(self.jump_idx, k)
        if pos < self.jump_idx.size and self.jump_idx[pos] == k:
            return self.pre[pos].copy()
        return self.values[k].copy()

    def jump_at(self, k: int) -> np.ndarray:
        return self.values[k] - self.left_limit(k)

    def left_values(self) -> np.ndarray:
        """Array of left limits ``x(t_k-)`` at every node."""
        out = np.array(self.values, copy=True)
        if self.jump_idx.size:
            out[self.jump_idx] = self.pre
        return out

    def jumps(self) -> np.ndarray:
        """Jump sizes at the marked nodes, shape (n_jumps, d)."""
        return self.values[self.jump_idx] - self.pre

    def __call__(self, s):
        """Evaluate the path at arbitrary times (right-continuous)."""
        s = np.asarray(s, dtype=float)
        k = np.searchsorted(self.times, s, side="right") - 1
        k = np.clip(k, 0, self.n)
        return self.values[k]

    def with_marks(self, jump_idx, pre) -> "GridPath":
        return GridPath(self.times, self.values, jump_idx, pre)


@dataclass(frozen=True)
class TimedPath:
    """A pair (t, path) with ``t`` on the grid of ``path``."""

    t: float
    path: GridPath
    snap_distance: float = 0.0

    @classmethod
    def at(cls, path: GridPath, t: float) -> "TimedPath":
        """Snap ``t`` to the nearest grid node and record the distance."""
        k, dist = path.snap(t)
        return cls(float(path.times[k]), path, dist)

    @property
    def k(self) -> int:
        return self.path.index(self.t)


def _marks_before(p: GridPath, k: int, inclusive: bool):
    sel = p.jump_idx <= k if inclusive else p.jump_idx < k
    return p.jump_idx[sel], p.pre[sel]


def stop(p: GridPath, t: float) -> GridPath:
    """Path frozen at its time-``t`` value from ``t`` onward."""
    k = p.index(t)
    v = np.array(p.values, copy=True)
    v[k:] = p.values[k]
    ji, jp = _marks_before(p, k, inclusive=True)
    return GridPath(p.times, v, ji, jp)


def stop_pre(p: GridPath, t: float) -> GridPath:
    """Path frozen at its left limit ``p(t-)`` from ``t`` onward."""
    k = p.index(t)
    v = np.array(p.values, copy=True)
    v[k:] = p.left_limit(k)
    ji, jp = _marks_before(p, k, inclusive=False)
    return GridPath(p.times, v, ji, jp)


def bump(p: GridPath, t: float, h) -> GridPath:
    """Stopped path shifted by ``h`` on ``[t, T]``.

    The shift acts on the original plateau ``p(t)``; the resulting jump at
    ``t`` is recorded with pre-jump value ``p(t-)``.
    """
    k = p.index(t)
    h = np.broadcast_to(np.asarray(h, dtype=float), (p.d,))
    v = np.array(p.values, copy=True)
    v[k:] = p.values[k] + h
    ji, jp = _marks_before(p, k, inclusive=False)
    if k > 0:
        left = p.left_limit(k)
        if p.is_jump(k) or np.any(h != 0):
            if np.any(v[k] != left):
                ji = np.append(ji, k)
                jp = np.vstack([jp, left[None, :]])
    return GridPath(p.times, v, ji, jp)


def restrict(p: GridPath, a: float, b: float) -> GridPath:
    """Segment of ``p`` on ``[a, b]`` shifted to start at time 0.

    Jump marks at the first node are dropped (a path starts without a jump).
    """
    ka, kb = p.index(a), p.index(b)
    times = p.times[ka:kb + 1] - p.times[ka]
    sel = (p.jump_idx > ka) & (p.jump_idx <= kb)
    return GridPath(times, p.values[ka:kb + 1], p.jump_idx[sel] - ka, p.pre[sel])


def concat(a: GridPath, s: float, b: GridPath) -> GridPath:
    """``a(t) 1{t<s} + b(t-s) 1{t>=s}`` on the merged grid."""
    if a.d != b.d:
        raise ValueError("dimension mismatch")
    if abs(a.T - s) > GRID_RTOL * max(1.0, abs(s)):
        raise GridMismatchError("a must end at s")
    if a.n == 0:
        return GridPath(b.times + s if s != 0 else b.times, b.values, b.jump_idx, b.pre)
    tail_t = s + b.times
    times = np.concatenate([a.times[:-1], tail_t])
    if not np.all(np.diff(times) > 0):
        raise GridMismatchError("incompatible grids")
    values = np.vstack([a.values[:-1], b.values])
    na = a.n
    sel = a.jump_idx < na
    ji = [a.jump_idx[sel]]
    jp = [a.pre[sel]]
    left = a.left_limit(na)
    if np.any(b.values[0] != left):
        ji.append(np.array([na]))
        jp.append(left[None, :])
    ji.append(b.jump_idx + na)
    jp.append(b.pre)
    return GridPath(times, values, np.concatenate(ji), np.vstack(jp))


def _merged_eval(p: GridPath, q: GridPath):
    grid = np.union1d(p.times, q.times)
    return grid, p(grid), q(grid)


def dist_star(a: TimedPath, b: TimedPath) -> float:
    """``|t_a - t_b|`` plus the sup-norm distance of the stopped paths."""
    pa, pb = stop(a.path, a.t), stop(b.path, b.t)
    _, va, vb = _merged_eval(pa, pb)
    sup = float(np.max(np.abs(va - vb))) if va.size else 0.0
    return abs(a.t - b.t) + sup


def continuous_part(p: GridPath) -> GridPath:
    """Path with every recorded jump removed (increments at jump nodes
    are replaced by the pre-jump increment)."""
    if p.jump_idx.size == 0:
        return p
    inc = np.diff(p.values, axis=0)
    inc[p.jump_idx - 1] = p.pre - p.values[p.jump_idx - 1]
    v = np.vstack([p.values[:1], p.values[0] + np.cumsum(inc, axis=0)])
    return GridPath(p.times, v)


def remove_jump(p: GridPath, k: int) -> GridPath:
    """Surgically remove the recorded jump at node ``k``: the path minus
    ``dx(t_k) 1[t_k, T]``."""
    pos = np.searchsorted(p.jump_idx, k)
    if pos >= p.jump_idx.size or p.jump_idx[pos] != k:
        return p
    dx = p.values[k] - p.pre[pos]
    v = np.array(p.values, copy=True)
    v[k:] = v[k:] - dx
    keep = np.arange(p.jump_idx.size) != pos
    ji = p.jump_idx[keep]
    jp = np.array(p.pre[keep], copy=True)
    later = ji > k
    jp[later] = jp[later] - dx
    return GridPath(p.times, v, ji, jp)


# serialization

def to_csv(p: GridPath, f: Optional[io.TextIOBase] = None) -> str:
    """Serialize with columns time, x_1..x_d, is_jump, pre_1..pre_d.

    Floats are written with 17 significant digits (lossless round trip).
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = p.d
    w.writerow(["time"] + [f"x_{i+1}" for i in range(d)] + ["is_jump"]
               + [f"pre_{i+1}" for i in range(d)])
    marks = dict(zip(p.jump_idx.tolist(), range(p.jump_idx.size)))
    fmt = "{:.17g}".format
    for k in range(p.times.size):
        row = [fmt(p.times[k])] + [fmt(x) for x in p.values[k]]
        if k in marks:
            row += ["1"] + [fmt(x) for x in p.pre[marks[k]]]
        else:
            row += ["0"] + [""] * d
        w.writerow(row)
    text = buf.getvalue()
    if f is not None:
        f.write(text)
    return text


def from_csv(src: Union[str, io.TextIOBase]) -> GridPath:
    """Inverse of :func:`to_csv`; accepts decimal or hex-float fields."""
    text = src if isinstance(src, str) else src.read()
    rows = list(csv.reader(io.StringIO(text)))
    header, rows = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x_"))

    def num(s):
        s = s.strip()
        return float.fromhex(s) if "0x" in s.lower() else float(s)

    times = np.array([num(r[0]) for r in rows])
    values = np.array([[num(x) for x in r[1:1 + d]] for r in rows]).reshape(len(rows), d)
    ji, jp = [], []
    for k, r in enumerate(rows):
        if r[1 + d].strip() == "1":
            ji.append(k)
            jp.append([num(x) for x in r[2 + d:2 + 2 * d]])
    return GridPath(times, values, ji, np.array(jp).reshape(len(ji), d))
