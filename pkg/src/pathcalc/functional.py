"""Non-anticipative path functionals and finite-difference derivative estimators.

Three derivatives are estimated:

* horizontal ``DF``: one-sided difference along the flat extension of the
  stopped path, Richardson-extrapolated over ``h0, h0/2, h0/4``;
* vertical gradient ``grad F``: central differences on vertical bumps;
* vertical Hessian: second central differences on double bumps, symmetrized.

Functionals of the form ``f(t, w(t), int_0^t w ds)`` ("cylinders") expose a
vectorized node evaluator, which lets the along-path estimators run on whole
grids at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .pathspace import GridPath, bump, stop

__all__ = [
    "REGULARITY_TAGS",
    "OutOfDomainError",
    "FDConfig",
    "FDResult",
    "PathFunctional",
    "Cylinder",
    "running_integral_nodes",
    "extend_flat",
    "horizontal_derivative",
    "vertical_gradient",
    "vertical_hessian",
    "check_non_anticipative",
    "derivatives_along",
    "node_states",
    "make_functional",
    "max_to_date",
    "FUNCTIONAL_IDS",
]

REGULARITY_TAGS = ("C00", "C01", "C11", "C12")


class OutOfDomainError(ValueError):
    """Derivative requested outside its domain (e.g. horizontal at t = T)."""


@dataclass(frozen=True)
class FDConfig:
    """Finite-difference settings.

    ``h0`` of ``None`` selects the default for each derivative kind:
    ``1e-4 T`` (horizontal), ``1e-5 (1 + |p(t)|)`` (gradient) and
    ``1e-3 (1 + |p(t)|)`` (Hessian).
    """

    h0: Optional[float] = None
    richardson_levels: int = 2
    side: str = "central"

    def __post_init__(self):
        if self.h0 is not None and not self.h0 > 0:
            raise ValueError("h0 must be positive")
        if self.richardson_levels < 1:
            raise ValueError("richardson_levels must be >= 1")
        if self.side not in ("right", "central"):
            raise ValueError("side must be 'right' or 'central'")


@dataclass
class FDResult:
    """Estimate with the size of the last Richardson correction."""

    value: np.ndarray
    error: float
    unstable: bool

    def __float__(self):
        return float(np.asarray(self.value).reshape(-1)[0])


def _richardson(D, order: int, step_order: int = 1):
    """Richardson table for estimates at h, h/2, h/4, ...

    ``order`` is the leading error power (1 one-sided, 2 central) and
    ``step_order`` the gap between successive error powers.
    Returns (value, error, unstable) where ``error`` is the size of the last
    correction and ``unstable`` flags corrections that grow across stages.
    """
    rows = [[np.asarray(x, dtype=float) for x in D]]
    p = order
    while len(rows[-1]) > 1:
        prev = rows[-1]
        fac = 2.0 ** p
        rows.append([(fac * prev[i + 1] - prev[i]) / (fac - 1.0) for i in range(len(prev) - 1)])
        p += step_order
    value = rows[-1][0]
    corr = [float(np.max(np.abs(rows[i][0] - rows[i - 1][-1]))) for i in range(1, len(rows))]
    err = corr[-1] if corr else 0.0
    scale = max(1.0, float(np.max(np.abs(value))))
    unstable = any(corr[i] > corr[i - 1] and corr[i] > 1e-8 * scale for i in range(1, len(corr)))
    return value, err, unstable


# functional container

@dataclass
class PathFunctional:
    """Non-anticipative map ``(t, path) -> float``.

    ``analytic_DF``, ``analytic_grad`` and ``analytic_hess`` are oracle
    callbacks with the same ``(t, path)`` signature.
    """

    fn: Callable
    name: str = "functional"
    regularity: str = "C12"
    analytic_DF: Optional[Callable] = None
    analytic_grad: Optional[Callable] = None
    analytic_hess: Optional[Callable] = None
    terminal_only: bool = False

    def __post_init__(self):
        if self.regularity not in REGULARITY_TAGS:
            raise ValueError(f"unknown regularity tag {self.regularity!r}")

    def __call__(self, t: float, p: GridPath) -> float:
        return float(self.fn(t, p))

    def along(self, p: GridPath, left: bool = False) -> np.ndarray:
        """``F(t_k, p_{^t_k})`` (or ``p_{^t_k-}``) at every node."""
        from .pathspace import stop_pre
        op = stop_pre if left else stop
        return np.array([self.fn(t, op(p, t)) for t in p.times])


def running_integral_nodes(p: GridPath) -> np.ndarray:
    """Exact ``int_0^{t_k} p ds`` for the piecewise-constant path, per node."""
    dt = np.diff(p.times)[:, None]
    out = np.zeros_like(p.values)
    out[1:] = np.cumsum(p.values[:-1] * dt, axis=0)
    return out


def node_states(p: GridPath, left: bool = False):
    """(t, x, I) arrays for cylinder evaluation at every node."""
    x = p.left_values() if left else np.array(p.values)
    return np.array(p.times), x, running_integral_nodes(p)


class Cylinder(PathFunctional):
    """Functional ``f(t, w(t), int_0^t w ds)`` with vectorized evaluation.

    ``f(t, x, I)`` takes arrays of shape (n,), (n, d), (n, d) and returns (n,).
    Optional analytic partials: ``f_t``, ``f_x`` (n, d), ``f_I`` (n, d),
    ``f_xx`` (n, d, d).
    """

    def __init__(self, f, name="cylinder", regularity="C12", f_t=None, f_x=None,
                 f_I=None, f_xx=None, T: Optional[float] = None):
        self.f = f
        self.f_t, self.f_x, self.f_I, self.f_xx = f_t, f_x, f_I, f_xx
        self.T = T
        super().__init__(fn=self._eval, name=name, regularity=regularity,
                         analytic_DF=self._DF if f_t is not None else None,
                         analytic_grad=self._grad if f_x is not None else None,
                         analytic_hess=self._hess if f_xx is not None else None)

    def node_eval(self, t, x, I):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float)
        I = np.asarray(I, dtype=float)
        return np.asarray(self.f(t, x, I), dtype=float)

    def _state(self, t, p):
        k = p.index(t)
        I = running_integral_nodes(p)[k]
        return np.array([p.times[k]]), p.values[k][None, :], I[None, :]

    def _eval(self, t, p):
        s = self._state(t, p)
        return float(self.node_eval(*s)[0])

    def _DF(self, t, p):
        tt, x, I = self._state(t, p)
        val = np.asarray(self.f_t(tt, x, I), dtype=float)
        if self.f_I is not None:
            val = val + np.sum(np.asarray(self.f_I(tt, x, I)) * x, axis=-1)
        return float(np.reshape(val, -1)[0])

    def _grad(self, t, p):
        return np.asarray(self.f_x(*self._state(t, p)), dtype=float).reshape(-1)

    def _hess(self, t, p):
        d = p.d
        return np.asarray(self.f_xx(*self._state(t, p)), dtype=float).reshape(d, d)

    def along(self, p: GridPath, left: bool = False) -> np.ndarray:
        return self.node_eval(*node_states(p, left))

    def analytic_along(self, p: GridPath, left: bool = False):
        """Analytic (DF, grad, hess) at every node; missing parts are None."""
        t, x, I = node_states(p, left)
        DF = grad = hess = None
        if self.f_t is not None:
            DF = np.asarray(self.f_t(t, x, I), dtype=float) * np.ones(t.size)
            if self.f_I is not None:
                DF = DF + np.sum(np.asarray(self.f_I(t, x, I)) * x, axis=-1)
        if self.f_x is not None:
            grad = np.asarray(self.f_x(t, x, I), dtype=float) * np.ones_like(x)
        if self.f_xx is not None:
            hess = np.asarray(self.f_xx(t, x, I), dtype=float) * np.ones((t.size, x.shape[1], x.shape[1]))
        return DF, grad, hess


# scalar estimators

def extend_flat(p: GridPath, t: float, h: float) -> GridPath:
    """``stop(p, t)`` with a grid node inserted at ``t + h`` (flat extension)."""
    q = stop(p, t)
    th = t + h
    k, dist = q.snap(th)
    if dist <= 1e-15 * max(1.0, q.T):
        return q
    if th > q.T:
        times = np.append(q.times, th)
        values = np.vstack([q.values, q.values[-1:]])
        return GridPath(times, values, q.jump_idx, q.pre)
    pos = int(np.searchsorted(q.times, th))
    times = np.insert(q.times, pos, th)
    values = np.insert(q.values, pos, q.values[pos - 1], axis=0)
    ji = q.jump_idx + (q.jump_idx >= pos)
    return GridPath(times, values, ji, q.pre)


def _h_levels(h0, levels):
    return [h0 / 2.0 ** j for j in range(levels + 1)]


def horizontal_derivative(F: PathFunctional, t: float, p: GridPath,
                          cfg: FDConfig = FDConfig()) -> FDResult:
    """Right horizontal derivative ``lim (F(t+h, p_{^t}) - F(t, p_{^t})) / h``."""
    k = p.index(t)
    t = float(p.times[k])
    if t >= p.T:
        raise OutOfDomainError("horizontal derivative is undefined at t = T")
    h0 = cfg.h0 if cfg.h0 is not None else 1e-4 * p.T
    h0 = min(h0, 0.5 * (p.T - t))
    base = F(t, stop(p, t))
    D = []
    for h in _h_levels(h0, cfg.richardson_levels):
        q = extend_flat(p, t, h)
        D.append((F(t + h, q) - base) / h)
    v, err, bad = _richardson(D, order=1)
    return FDResult(float(v), err, bad)


def _vstep(cfg: FDConfig, x, scale):
    if cfg.h0 is not None:
        return cfg.h0
    return scale * (1.0 + float(np.max(np.abs(x))))


def vertical_gradient(F: PathFunctional, t: float, p: GridPath,
                      cfg: FDConfig = FDConfig()) -> FDResult:
    """Central-difference gradient along vertical bumps at time ``t``."""
    k = p.index(t)
    d = p.d
    h0 = _vstep(cfg, p.values[k], 1e-5)
    e = np.eye(d)
    Ds = []
    for h in _h_levels(h0, cfg.richardson_levels):
        g = np.empty(d)
        for i in range(d):
            g[i] = (F(t, bump(p, t, h * e[i])) - F(t, bump(p, t, -h * e[i]))) / (2 * h)
        Ds.append(g)
    v, err, bad = _richardson(Ds, order=2, step_order=2)
    return FDResult(np.asarray(v), err, bad)


def vertical_hessian(F: PathFunctional, t: float, p: GridPath,
                     cfg: FDConfig = FDConfig()) -> FDResult:
    """Symmetrized second-difference Hessian along vertical bumps."""
    k = p.index(t)
    d = p.d
    h0 = _vstep(cfg, p.values[k], 1e-3)
    e = np.eye(d)
    f0 = F(t, stop(p, t))
    Hs = []
    for h in _h_levels(h0, cfg.richardson_levels):
        H = np.empty((d, d))
        for i in range(d):
            fp = F(t, bump(p, t, h * e[i]))
            fm = F(t, bump(p, t, -h * e[i]))
            H[i, i] = (fp - 2 * f0 + fm) / h ** 2
            for j in range(i + 1, d):
                fpp = F(t, bump(p, t, h * (e[i] + e[j])))
                fpm = F(t, bump(p, t, h * (e[i] - e[j])))
                fmp = F(t, bump(p, t, h * (e[j] - e[i])))
                fmm = F(t, bump(p, t, -h * (e[i] + e[j])))
                H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h ** 2)
        Hs.append(H)
    v, err, bad = _richardson(Hs, order=2, step_order=2)
    v = 0.5 * (v + v.T)
    return FDResult(v, err, bad)


@dataclass
class NonAnticipativeReport:
    max_deviation: float
    n_checked: int
    passed: bool
    worst: Optional[tuple] = field(default=None, repr=False)


def check_non_anticipative(F: PathFunctional, corpus: Callable, n: int) -> NonAnticipativeReport:
    """Max over ``n`` sampled (t, path) of ``|F(t, p) - F(t, stop(p, t))|``.

    ``corpus(i)`` returns a pair ``(t, path)``. Passes iff the deviation is 0.
    """
    worst, where = 0.0, None
    for i in range(n):
        t, p = corpus(i)
        dev = abs(F(t, p) - F(t, stop(p, t)))
        if not dev <= worst:
            worst, where = dev, (t, p)
    return NonAnticipativeReport(worst, n, worst == 0.0, where)


# along-path estimators

def derivatives_along(F: PathFunctional, p: GridPath, cfg: FDConfig = FDConfig(),
                      left: bool = True, hessian: bool = True):
    """FD estimates of (DF, grad, hess) at every node of ``p``.

    With ``left=True`` the derivatives are taken at ``(t_k, p_{^t_k-})``,
    i.e. before any jump at ``t_k``. Returns a dict with arrays ``DF`` (n+1,),
    ``grad`` (n+1, d), ``hess`` (n+1, d, d) and an ``unstable`` flag.
    Cylinders are handled in vectorized form; other functionals node by node.
    """
    if isinstance(F, Cylinder):
        return _cyl_derivatives_along(F, p, cfg, left, hessian)
    from .pathspace import stop_pre
    n1, d = p.times.size, p.d
    DF = np.zeros(n1)
    grad = np.zeros((n1, d))
    hess = np.zeros((n1, d, d))
    bad = False
    for k, t in enumerate(p.times):
        q = stop_pre(p, t) if left else stop(p, t)
        if k < n1 - 1:
            r = horizontal_derivative(F, t, q, cfg)
            DF[k], bad = r.value, bad or r.unstable
        g = vertical_gradient(F, t, q, cfg)
        grad[k], bad = g.value, bad or g.unstable
        if hessian:
            h = vertical_hessian(F, t, q, cfg)
            hess[k], bad = h.value, bad or h.unstable
    if n1 > 1:
        DF[-1] = DF[-2]
    return {"DF": DF, "grad": grad, "hess": hess, "unstable": bad}


def _cyl_derivatives_along(F: Cylinder, p: GridPath, cfg: FDConfig, left: bool, hessian: bool):
    t, x, I = node_states(p, left)
    n1, d = x.shape
    T = p.T
    f0 = F.node_eval(t, x, I)
    bad = False
    # horizontal: f(t+h, x, I + x h), h shrunk near T
    h0 = cfg.h0 if cfg.h0 is not None else 1e-4 * T
    room = np.maximum(T - t, 0.0)
    hb = np.where(room > 0, np.minimum(h0, 0.5 * np.where(room > 0, room, 1.0)), h0)
    Ds = []
    for j in range(cfg.richardson_levels + 1):
        h = hb / 2.0 ** j
        Ds.append((F.node_eval(t + h, x, I + x * h[:, None]) - f0) / h)
    DF, _, b = _richardson(Ds, order=1)
    bad |= b
    # gradient
    scale = 1.0 + np.max(np.abs(x), axis=1)
    hg = (cfg.h0 * np.ones(n1)) if cfg.h0 is not None else 1e-5 * scale
    e = np.eye(d)
    Gs = []
    for j in range(cfg.richardson_levels + 1):
        h = hg / 2.0 ** j
        g = np.empty((n1, d))
        for i in range(d):
            dx = h[:, None] * e[i]
            g[:, i] = (F.node_eval(t, x + dx, I) - F.node_eval(t, x - dx, I)) / (2 * h)
        Gs.append(g)
    grad, _, b = _richardson(Gs, order=2, step_order=2)
    bad |= b
    hess = np.zeros((n1, d, d))
    if hessian:
        hh = (cfg.h0 * np.ones(n1)) if cfg.h0 is not None else 1e-3 * scale
        Hs = []
        for j in range(cfg.richardson_levels + 1):
            h = hh / 2.0 ** j
            H = np.empty((n1, d, d))
            for i in range(d):
                di = h[:, None] * e[i]
                H[:, i, i] = (F.node_eval(t, x + di, I) - 2 * f0 + F.node_eval(t, x - di, I)) / h ** 2
                for k in range(i + 1, d):
                    dk = h[:, None] * e[k]
                    v = (F.node_eval(t, x + di + dk, I) - F.node_eval(t, x + di - dk, I)
                         - F.node_eval(t, x - di + dk, I) + F.node_eval(t, x - di - dk, I)) / (4 * h ** 2)
                    H[:, i, k] = H[:, k, i] = v
            Hs.append(H)
        hess, _, b = _richardson(Hs, order=2, step_order=2)
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        bad |= b
    return {"DF": np.asarray(DF), "grad": np.asarray(grad), "hess": hess, "unstable": bool(bad)}


# built-in functionals

def _cyl_square():
    return Cylinder(lambda t, x, I: np.sum(x * x, axis=-1), name="square",
                    f_t=lambda t, x, I: np.zeros(len(t)),
                    f_x=lambda t, x, I: 2 * x,
                    f_I=lambda t, x, I: np.zeros_like(x),
                    f_xx=lambda t, x, I: 2 * np.eye(x.shape[-1])[None] * np.ones((len(t), 1, 1)))


def _cyl_running_integral():
    def fI(t, x, I):
        out = np.zeros_like(I)
        out[:, 0] = 1.0
        return out
    return Cylinder(lambda t, x, I: I[:, 0], name="running-integral",
                    f_t=lambda t, x, I: np.zeros(len(t)),
                    f_x=lambda t, x, I: np.zeros_like(x), f_I=fI,
                    f_xx=lambda t, x, I: np.zeros((len(t), x.shape[1], x.shape[1])))


def _cyl_terminal_linear(a):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return Cylinder(lambda t, x, I: x @ a, name="terminal-linear:" + ",".join(f"{v:g}" for v in a),
                    f_t=lambda t, x, I: np.zeros(len(t)),
                    f_x=lambda t, x, I: np.broadcast_to(a, x.shape).copy(),
                    f_I=lambda t, x, I: np.zeros_like(x),
                    f_xx=lambda t, x, I: np.zeros((len(t), x.shape[1], x.shape[1])))


def _cyl_time_weighted(T):
    def fx(t, x, I):
        out = np.zeros_like(x)
        out[:, 0] = T - t
        return out
    return Cylinder(lambda t, x, I: (T - t) * x[:, 0], name="time-weighted", T=T,
                    f_t=lambda t, x, I: -x[:, 0], f_x=fx,
                    f_I=lambda t, x, I: np.zeros_like(x),
                    f_xx=lambda t, x, I: np.zeros((len(t), x.shape[1], x.shape[1])))


def _cyl_power(k):
    def fx(t, x, I):
        out = np.zeros_like(x)
        out[:, 0] = k * x[:, 0] ** (k - 1)
        return out

    def fxx(t, x, I):
        out = np.zeros((len(t), x.shape[1], x.shape[1]))
        out[:, 0, 0] = k * (k - 1) * x[:, 0] ** (k - 2)
        return out
    return Cylinder(lambda t, x, I: x[:, 0] ** k, name=f"power:{k}",
                    f_t=lambda t, x, I: np.zeros(len(t)), f_x=fx,
                    f_I=lambda t, x, I: np.zeros_like(x), f_xx=fxx)


def _first(fn):
    """Lift a scalar formula in (t, x1, I1) to the first coordinate."""
    def g(t, x, I):
        out = np.zeros_like(x)
        out[:, 0] = fn(t, x[:, 0], I[:, 0])
        return out
    return g


def _first2(fn):
    def g(t, x, I):
        out = np.zeros((len(t), x.shape[1], x.shape[1]))
        out[:, 0, 0] = fn(t, x[:, 0], I[:, 0])
        return out
    return g


def _cyl_smooth():
    # exp(-t) sin(x) + I^2 / 2
    return Cylinder(lambda t, x, I: np.exp(-t) * np.sin(x[:, 0]) + 0.5 * I[:, 0] ** 2,
                    name="smooth-cyl",
                    f_t=lambda t, x, I: -np.exp(-t) * np.sin(x[:, 0]),
                    f_x=_first(lambda t, x, I: np.exp(-t) * np.cos(x)),
                    f_I=_first(lambda t, x, I: I),
                    f_xx=_first2(lambda t, x, I: -np.exp(-t) * np.sin(x)))


def _cyl_mixed():
    # x I + t x^2
    return Cylinder(lambda t, x, I: x[:, 0] * I[:, 0] + t * x[:, 0] ** 2,
                    name="mixed-cyl",
                    f_t=lambda t, x, I: x[:, 0] ** 2,
                    f_x=_first(lambda t, x, I: I + 2 * t * x),
                    f_I=_first(lambda t, x, I: x),
                    f_xx=_first2(lambda t, x, I: 2 * t + 0 * x))


def _product():
    def fx(t, x, I):
        out = np.zeros_like(x)
        out[:, 0], out[:, 1] = x[:, 1], x[:, 0]
        return out

    def fxx(t, x, I):
        out = np.zeros((len(t), x.shape[1], x.shape[1]))
        out[:, 0, 1] = out[:, 1, 0] = 1.0
        return out
    return Cylinder(lambda t, x, I: x[:, 0] * x[:, 1], name="product",
                    f_t=lambda t, x, I: np.zeros(len(t)), f_x=fx,
                    f_I=lambda t, x, I: np.zeros_like(x), f_xx=fxx)


def max_to_date() -> PathFunctional:
    """``max_{s <= t} w^1(s)``; no derivative oracle (stress tests only)."""
    def fn(t, p):
        k = p.index(t)
        m = float(np.max(p.values[:k + 1, 0]))
        if p.jump_idx.size:
            sel = p.jump_idx <= k
            if np.any(sel):
                m = max(m, float(np.max(p.pre[sel, 0])))
        return m
    return PathFunctional(fn, name="max-to-date", regularity="C00")


FUNCTIONAL_IDS = (
    "square", "running-integral", "terminal-linear:a", "asian:f-id",
    "gamma-invariant:f-id,gamma-id", "max-to-date", "time-weighted",
    "power:k", "smooth-cyl", "mixed-cyl", "product",
)

FUNCTIONAL_DOCS = {
    "square": "|w(t)|^2",
    "running-integral": "int_0^t w^1(s) ds",
    "terminal-linear:a": "<a, w(t)> with a given as comma-separated numbers",
    "asian:f-id": "f(t, J(t), w(t)) with J(t) = int_0^t w ds + (T - t) w(t); f-id in {geom, arith-call:K, linear-J, linear-x, square-J}",
    "gamma-invariant:f-id,gamma-id": "f(w(t) + int_t^T gamma(s, Y) ds) along the gamma flow; f-id in {quad, linear}",
    "max-to-date": "max_{s<=t} w^1(s) (no derivative oracle)",
    "time-weighted": "(T - t) w^1(t)",
    "power:k": "w^1(t)^k",
    "smooth-cyl": "exp(-t) sin(w^1(t)) + (int_0^t w^1 ds)^2 / 2",
    "mixed-cyl": "w^1(t) int_0^t w^1 ds + t w^1(t)^2",
    "product": "w^1(t) w^2(t)",
}


def make_functional(spec: str, T: float = 1.0, d: int = 1) -> PathFunctional:
    """Build a registered functional from its string id."""
    head, _, arg = spec.partition(":")
    if head == "square":
        return _cyl_square()
    if head == "running-integral":
        return _cyl_running_integral()
    if head == "terminal-linear":
        a = [float(v) for v in arg.split(",")] if arg else [1.0] * d
        return _cyl_terminal_linear(a)
    if head == "time-weighted":
        return _cyl_time_weighted(T)
    if head == "power":
        return _cyl_power(int(arg or 2))
    if head == "smooth-cyl":
        return _cyl_smooth()
    if head == "mixed-cyl":
        return _cyl_mixed()
    if head == "product":
        return _product()
    if head == "max-to-date":
        return max_to_date()
    if head == "asian":
        from .apps import asian_functional
        return asian_functional(arg, T=T, d=d)
    if head == "gamma-invariant":
        from .apps import gamma_invariant_from_id
        return gamma_invariant_from_id(arg, T=T, d=d)
    raise KeyError(f"unknown functional id {spec!r}")
