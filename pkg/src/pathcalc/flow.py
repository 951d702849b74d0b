"""Flows ``dY = gamma(t, Y_{^t}) dt`` started from a stopped path, the
derivative of a functional along such a flow, and the horizontal derivative
recovered from it.

The flow is computed by Picard iteration on windows of length ``1/(2M)``;
with ``M`` at least the Lipschitz modulus of ``gamma`` each Picard map is a
contraction with ratio at most 1/2. Integrals are composite trapezoid sums on
a lattice of step ``T / 2^p`` that does not depend on the starting time, so
flows restarted from a later point of an earlier flow see the same nodes.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .functional import (FDConfig, FDResult, OutOfDomainError, PathFunctional,
                         _richardson, extend_flat, horizontal_derivative,
                         vertical_gradient, Cylinder, node_states)
from .pathspace import GridPath, continuous_part, stop, stop_pre

__all__ = [
    "ContractionFailure",
    "InvalidDirectionError",
    "Direction",
    "FlowSolution",
    "make_direction",
    "solve_flow",
    "gamma_derivative",
    "horizontal_from_gamma",
    "verify_radon_nikodym",
    "gamma_derivative_along",
    "check_lipschitz",
    "DIRECTION_IDS",
]


class ContractionFailure(RuntimeError):
    """Picard iteration did not converge; ``defect`` holds the last defect."""

    def __init__(self, msg, defect):
        super().__init__(msg)
        self.defect = defect


class InvalidDirectionError(ValueError):
    """Direction whose Lipschitz modulus is not integrable."""


def _cont_arrays(times, values, jump_idx, pre):
    if jump_idx is None or len(jump_idx) == 0:
        return values
    inc = np.diff(values, axis=0)
    inc[np.asarray(jump_idx) - 1] = pre - values[np.asarray(jump_idx) - 1]
    return np.vstack([values[:1], values[0] + np.cumsum(inc, axis=0)])


@dataclass
class Direction:
    """A non-anticipative direction ``gamma(t, path) -> R^d``.

    ``nodes(times, values)`` evaluates gamma at every node of a continuous
    piecewise-constant path in one pass. ``state_fn(t, y, I)`` is set for
    directions that depend on the path only through ``(t, y(t), int_0^t y)``.
    """

    id: str
    nodes: Callable
    g: Callable
    bound_hint: Optional[float] = None
    state_fn: Optional[Callable] = None
    ignores_jumps: bool = False

    def nodes_on(self, times, values, jump_idx=None, pre=None):
        if self.ignores_jumps:
            values = _cont_arrays(times, values, jump_idx, pre)
        return self.nodes(np.asarray(times, dtype=float), np.asarray(values, dtype=float))

    def __call__(self, t: float, p: GridPath) -> np.ndarray:
        k = p.index(t)
        q = stop(p, t)
        return self.nodes_on(q.times[:k + 1], q.values[:k + 1],
                             q.jump_idx, q.pre)[k]


def _left_integral(times, values):
    out = np.zeros_like(values)
    if times.size > 1:
        out[1:] = np.cumsum(values[:-1] * np.diff(times)[:, None], axis=0)
    return out


def _dir_zero():
    return Direction("zero", lambda t, v: np.zeros_like(v), lambda t: np.zeros_like(np.asarray(t, float)),
                     state_fn=lambda t, y, I: np.zeros_like(y))


def _dir_const(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    name = "const:" + ",".join(f"{v:g}" for v in c)
    return Direction(name, lambda t, v: np.broadcast_to(c, v.shape).copy(),
                     lambda t: np.zeros_like(np.asarray(t, float)),
                     state_fn=lambda t, y, I: np.broadcast_to(c, y.shape).copy())


def _dir_self():
    return Direction("self", lambda t, v: np.array(v, copy=True),
                     lambda t: np.ones_like(np.asarray(t, float)), bound_hint=1.0,
                     state_fn=lambda t, y, I: np.array(y, copy=True))


def _running_mean_nodes(t, v):
    I = _left_integral(t, v)
    out = np.array(v, copy=True)
    pos = t > 0
    out[pos] = I[pos] / t[pos, None]
    return out


def _running_mean_state(t, y, I):
    t = np.asarray(t, dtype=float)
    out = np.array(y, copy=True)
    pos = t > 0
    out[pos] = I[pos] / t[pos, None]
    return out


def _dir_running_mean():
    return Direction("running-mean", _running_mean_nodes,
                     lambda t: np.ones_like(np.asarray(t, float)), bound_hint=1.0,
                     state_fn=_running_mean_state)


def _ignore_jump(base: Direction):
    return Direction("ignore-jump:" + base.id, base.nodes, base.g, base.bound_hint,
                     base.state_fn, ignores_jumps=True)


DIRECTION_IDS = ("zero", "const:c", "self", "running-mean", "ignore-jump:<base-id>")

DIRECTION_DOCS = {
    "zero": "gamma = 0 (flat extension)",
    "const:c": "gamma = c, comma-separated vector",
    "self": "gamma(t, y) = y(t)",
    "running-mean": "gamma(t, y) = (1/t) int_0^t y ds, y(0) at t = 0",
    "ignore-jump:<base-id>": "base direction evaluated on the path with recorded jumps removed",
}


def make_direction(spec: str, d: int = 1) -> Direction:
    """Build a registered direction from its string id."""
    head, _, arg = spec.partition(":")
    if head == "zero":
        return _dir_zero()
    if head == "const":
        c = [float(v) for v in arg.split(",")] if arg else [1.0]
        if len(c) == 1 and d > 1:
            c = c * d
        return _dir_const(c)
    if head == "self":
        return _dir_self()
    if head == "running-mean":
        return _dir_running_mean()
    if head == "ignore-jump":
        return _ignore_jump(make_direction(arg, d))
    raise KeyError(f"unknown direction id {spec!r}")


def check_lipschitz(dir: Direction, pairs, tol: float = 1e-12):
    """Largest violation of ``|gamma(t,x) - gamma(t,y)| <= g(t) |x - y|_sup``
    over sampled ``(t, x, y)`` triples (<= 0 means no violation)."""
    worst = -np.inf
    for t, x, y in pairs:
        gx, gy = dir(t, x), dir(t, y)
        kx = x.index(t)
        sx, sy = stop(x, t), stop(y, t)
        if dir.ignores_jumps:
            sx, sy = continuous_part(sx), continuous_part(sy)
        sup = float(np.max(np.abs(sx.values[:kx + 1] - sy.values[:kx + 1])))
        lhs = float(np.linalg.norm(gx - gy))
        worst = max(worst, lhs - float(dir.g(t)) * sup - tol)
    return worst


@dataclass
class FlowSolution:
    path: GridPath
    s: float
    iterations: list
    ratios: list
    residual: float
    windows: list = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        r = [x for w in self.ratios for x in w]
        return max(r) if r else 0.0


_CACHE: "OrderedDict[tuple, FlowSolution]" = OrderedDict()
_CACHE_LOCK = threading.Lock()
_CACHE_MAX = 256


def clear_cache():
    with _CACHE_LOCK:
        _CACHE.clear()


def _lattice_step(T, M, tol):
    need = max(512.0 * M * T, T / math.sqrt(tol), 256.0)
    p = min(max(int(math.ceil(math.log2(need))), 8), 20)
    return T / 2.0 ** p


def _cumtrapz(u, f):
    out = np.zeros_like(f)
    out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(u)[:, None], axis=0)
    return out


def solve_flow(dir: Direction, s: float, w: GridPath, tol: float = 1e-10,
               t_end: Optional[float] = None, step: Optional[float] = None,
               max_iter: int = 200, init: Optional[Callable] = None,
               use_cache: bool = True, anchor: float = 0.0) -> FlowSolution:
    """Solve ``y(t) = w(s) + int_s^t gamma(u, y_{^u}) du`` on ``[s, t_end]``.

    The returned path equals ``w`` on ``[0, s]``; when ``t_end < T`` it is
    extended flat to ``T``. ``init(u)`` optionally supplies the initial Picard
    iterate on the flow nodes (defaults to the constant ``w(s)``). Flow nodes
    are the lattice ``anchor + j * step`` inside ``(s, t_end)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    T = w.T
    t_end = T if t_end is None else float(t_end)
    k = w.index(s)
    s = float(w.times[k])
    if t_end <= s:
        raise OutOfDomainError("flow horizon must exceed the start time")
    key = (dir.id, s, w.fingerprint(), tol, t_end, step, anchor)
    if use_cache and init is None:
        with _CACHE_LOCK:
            hit = _CACHE.get(key)
            if hit is not None:
                _CACHE.move_to_end(key)
                return hit

    ugrid = np.linspace(s, t_end, 257)
    gvals = np.asarray(dir.g(ugrid), dtype=float)
    if not np.all(np.isfinite(gvals)) or np.any(gvals < 0):
        raise InvalidDirectionError(f"Lipschitz modulus of {dir.id!r} is not integrable on [s, T]")
    gint = float(np.sum(0.5 * (gvals[1:] + gvals[:-1]) * np.diff(ugrid)))
    M = max(dir.bound_hint or 0.0, gint, float(np.max(gvals)), 0.5 / (t_end - s))

    if step is None:
        step = _lattice_step(T, M, tol)
    j0 = math.floor((s - anchor) / step + 1e-9) + 1
    j1 = math.floor((t_end - anchor) / step - 1e-9)
    lat = anchor + np.arange(j0, j1 + 1) * step
    lat = lat[(lat > s + 1e-12 * max(1.0, T)) & (lat < t_end - 1e-12 * max(1.0, T))]
    u = np.concatenate([[s], lat, [t_end]])

    pre_t = w.times[:k + 1]
    pre_v = w.values[:k + 1]
    sel = w.jump_idx <= k
    ji, jp = w.jump_idx[sel], w.pre[sel]
    d = w.d
    y0 = w.values[k].copy()

    times = np.concatenate([pre_t, u[1:]])
    Y = np.vstack([pre_v, np.broadcast_to(y0, (u.size - 1, d))])
    if init is not None:
        Y[k + 1:] = np.asarray(init(u[1:]), dtype=float).reshape(-1, d)

    L = 1.0 / (2.0 * M)
    bounds = [s]
    while bounds[-1] < t_end - 1e-15:
        bounds.append(min(bounds[-1] + L, t_end))
    widx = [int(np.searchsorted(u, b - 1e-12 * max(1.0, T))) for b in bounds]
    widx[-1] = u.size - 1

    iters, ratios, windows = [], [], []
    for a, b in zip(widx[:-1], widx[1:]):
        if b <= a:
            continue
        ga, gb = k + a, k + b
        ua = u[a:b + 1]
        start = Y[ga].copy()
        prev_def = None
        rs = []
        for it in range(1, max_iter + 1):
            gam = dir.nodes_on(times[:gb + 1], Y[:gb + 1], ji, jp)[ga:gb + 1]
            new = start + _cumtrapz(ua, gam)
            defect = float(np.max(np.abs(new - Y[ga:gb + 1])))
            Y[ga:gb + 1] = new
            if prev_def is not None and prev_def > 0 and defect > 0:
                rs.append(defect / prev_def)
            prev_def = defect
            if defect <= 0.1 * tol:
                break
        else:
            raise ContractionFailure(
                f"Picard iteration for {dir.id!r} did not converge in {max_iter} iterations",
                prev_def)
        iters.append(it)
        ratios.append(rs)
        windows.append((float(ua[0]), float(ua[-1])))

    gam = dir.nodes_on(times, Y, ji, jp)[k:]
    resid = float(np.max(np.abs(Y[k:] - (y0 + _cumtrapz(u, gam)))))
    if t_end < T:
        times = np.append(times, T)
        Y = np.vstack([Y, Y[-1:]])
    sol = FlowSolution(GridPath(times, Y, ji, jp), s, iters, ratios, resid, windows)
    if use_cache and init is None:
        with _CACHE_LOCK:
            _CACHE[key] = sol
            while len(_CACHE) > _CACHE_MAX:
                _CACHE.popitem(last=False)
    return sol


def gamma_derivative(F: PathFunctional, dir: Direction, t: float, p: GridPath,
                     cfg: FDConfig = FDConfig(), tol: float = 1e-13) -> FDResult:
    """One-sided Richardson derivative of ``h -> F(t+h, Y^{t,p}_{^t+h})``."""
    k = p.index(t)
    t = float(p.times[k])
    if t >= p.T:
        raise OutOfDomainError("gamma derivative is undefined at t = T")
    h0 = cfg.h0 if cfg.h0 is not None else 1e-4 * p.T
    h0 = min(h0, 0.5 * (p.T - t))
    base = F(t, stop(p, t))
    sol = solve_flow(dir, t, p, tol=tol, t_end=t + h0, step=h0 / 256.0, anchor=t)
    Y = sol.path
    D = []
    for j in range(cfg.richardson_levels + 1):
        h = h0 / 2.0 ** j
        th = float(Y.times[Y.index(t + h)])
        D.append((F(th, stop(Y, th)) - base) / (th - t))
    v, err, bad = _richardson(D, order=1)
    return FDResult(float(v), err, bad)


def horizontal_from_gamma(F: PathFunctional, dir: Direction, t: float, p: GridPath,
                          cfg: FDConfig = FDConfig()) -> FDResult:
    """``D^gamma F - <grad F(t, p_{^t-}), gamma(t, p_{^t})>``."""
    dg = gamma_derivative(F, dir, t, p, cfg)
    grad = vertical_gradient(F, t, stop_pre(p, t), cfg)
    gam = dir(t, p)
    val = dg.value - float(np.dot(grad.value, gam))
    return FDResult(val, dg.error + grad.error * float(np.linalg.norm(gam)),
                    dg.unstable or grad.unstable)


def verify_radon_nikodym(F: PathFunctional, dir: Direction, t: float, p: GridPath,
                         h: float, n_sub: int = 64, cfg: FDConfig = FDConfig()) -> float:
    """``|F(t+h, p_{^t}) - F(t, p_{^t}) - int_0^h DF(t+s, p_{^t}) ds|`` with the
    integrand from :func:`horizontal_from_gamma` and ``n_sub`` Gauss-Legendre nodes."""
    k = p.index(t)
    t = float(p.times[k])
    if t + h > p.T + 1e-12:
        raise OutOfDomainError("t + h exceeds T")
    x, wq = np.polynomial.legendre.leggauss(n_sub)
    s_nodes = t + 0.5 * h * (x + 1.0)
    q = stop(p, t)
    for sn in np.append(s_nodes, t + h):
        q = extend_flat(q, t, sn - t) if q.snap(sn)[1] > 0 else q
    lhs = F(t + h, q) - F(t, q)
    vals = np.array([horizontal_from_gamma(F, dir, float(sn), q, cfg).value for sn in s_nodes])
    quad = 0.5 * h * float(np.dot(wq, vals))
    return abs(lhs - quad)


def _flow_states(dir: Direction, t, y, I, yc, Ic, h, substeps=1):
    """RK4 transport of the cylinder state along the flow for time ``h``.

    (y, I) is the path state seen by the functional, (yc, Ic) the state seen
    by gamma (they differ for jump-ignoring directions).
    """
    dt = h / substeps
    for _ in range(substeps):
        def rhs(tt, yc_, Ic_):
            return dir.state_fn(tt, yc_, Ic_)
        k1 = rhs(t, yc, Ic)
        k2 = rhs(t + dt / 2, yc + dt[:, None] / 2 * k1, Ic + dt[:, None] / 2 * yc)
        y2 = yc + dt[:, None] / 2 * k1
        k3 = rhs(t + dt / 2, yc + dt[:, None] / 2 * k2, Ic + dt[:, None] / 2 * y2)
        y3 = yc + dt[:, None] / 2 * k2
        k4 = rhs(t + dt, yc + dt[:, None] * k3, Ic + dt[:, None] * y3)
        y4 = yc + dt[:, None] * k3
        incr = dt[:, None] / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        Iinc = dt[:, None] / 6 * (yc + 2 * y2 + 2 * y3 + y4)
        # the functional's state moves by the same increments
        y, I = y + incr, I + Iinc + (y - yc) * dt[:, None]
        yc, Ic = yc + incr, Ic + Iinc
        t = t + dt
    return y, I


def gamma_derivative_along(F: Cylinder, dir: Direction, p: GridPath,
                           cfg: FDConfig = FDConfig(), left: bool = False) -> np.ndarray:
    """Vectorized ``D^gamma F`` at every node for cylinder functionals and
    state-form directions (the last node repeats the previous value)."""
    if dir.state_fn is None:
        raise ValueError(f"direction {dir.id!r} has no state form")
    t, x, I = node_states(p, left)
    if dir.ignores_jumps:
        c = continuous_part(p)
        _, xc, Ic = node_states(c, False)
    else:
        xc, Ic = x, I
    T = p.T
    h0 = cfg.h0 if cfg.h0 is not None else 1e-4 * T
    room = T - t
    hb = np.where(room > 0, np.minimum(h0, 0.5 * np.where(room > 0, room, 1.0)), h0)
    f0 = F.node_eval(t, x, I)
    D = []
    for j in range(cfg.richardson_levels + 1):
        h = hb / 2.0 ** j
        y1, I1 = _flow_states(dir, t, x, I, xc, Ic, h)
        D.append((F.node_eval(t + h, y1, I1) - f0) / h)
    v, _, _ = _richardson(D, order=1)
    v = np.asarray(v, dtype=float)
    if v.size > 1:
        v[-1] = v[-2]
    return v
