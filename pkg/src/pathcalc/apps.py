"""Applications: the Asian pricing functional and functionals that are
constant along the flow of a jump-ignoring direction.

Asian functional: ``F(t, X) = f(t, J(t), X(t))`` with
``J(t) = int_0^t X ds + (T - t) X(t)``, the conditional expectation of the
running integral at ``T`` under driftless dynamics. It is a cylinder in
``(t, x, I)`` and carries analytic partials.

Gamma-invariant functional: ``F(t, X) = f(Y(T))`` where ``Y`` follows the
direction from ``t`` on, started from the path stopped at ``t``. When the
direction ignores jumps, a vertical bump of ``X(t)`` moves ``Y(T)`` by the
same amount, so ``grad F = grad f(Y(T))``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.stats import norm

from .flow import Direction, _flow_states, make_direction, solve_flow
from .functional import (Cylinder, FDConfig, PathFunctional, horizontal_derivative,
                         node_states, running_integral_nodes, vertical_gradient)
from .levy import LevyPath
from .pathspace import GridPath, continuous_part, stop

__all__ = [
    "AsianSpec",
    "ASIAN_IDS",
    "asian_spec",
    "asian_functional",
    "asian_derivatives",
    "asian_fd_check",
    "asian_J",
    "AsianReport",
    "asian_pricing_residual",
    "GammaInvariantFunctional",
    "gamma_invariant_functional",
    "gamma_invariant_from_id",
    "GammaInvariantResidual",
    "verify_gamma_invariant",
]


# Asian functional

@dataclass
class AsianSpec:
    """``f(t, J, x)`` and its partials; arrays (n,), (n, d), (n, d).

    Only the first coordinate enters every registered payoff, so the
    second-order partials are scalars ``(n,)`` in that coordinate.
    """

    name: str
    f: Callable
    f_t: Callable
    f_J: Callable
    f_x: Callable
    f_JJ: Callable
    f_Jx: Callable
    f_xx: Callable


ASIAN_IDS = ("geom", "arith-call:K", "linear-J", "linear-x", "square-J")


def _zero(t, J, x):
    return np.zeros(np.shape(t))


def asian_spec(fid: str, T: float = 1.0, v: float = 1.0) -> AsianSpec:
    """Registered payoffs; ``geom``, ``arith-call`` and ``square-J`` are
    pricing functions for a Brownian first coordinate with variance rate ``v``."""
    head, _, arg = fid.partition(":")
    if head == "linear-J":
        return AsianSpec(fid, lambda t, J, x: J[:, 0], _zero,
                         lambda t, J, x: np.ones(np.shape(t)), _zero, _zero, _zero, _zero)
    if head == "linear-x":
        return AsianSpec(fid, lambda t, J, x: x[:, 0], _zero, _zero,
                         lambda t, J, x: np.ones(np.shape(t)), _zero, _zero, _zero)
    if head == "square-J":
        return AsianSpec(fid, lambda t, J, x: J[:, 0] ** 2 + v * (T - t) ** 3 / 3.0,
                         lambda t, J, x: -v * (T - t) ** 2,
                         lambda t, J, x: 2.0 * J[:, 0], _zero,
                         lambda t, J, x: np.full(np.shape(t), 2.0), _zero, _zero)
    if head == "geom":
        def g(t, J, x):
            return np.exp(J[:, 0] / T + v * (T - t) ** 3 / (6.0 * T ** 2))
        return AsianSpec(fid, g,
                         lambda t, J, x: -v * (T - t) ** 2 / (2.0 * T ** 2) * g(t, J, x),
                         lambda t, J, x: g(t, J, x) / T, _zero,
                         lambda t, J, x: g(t, J, x) / T ** 2, _zero, _zero)
    if head == "arith-call":
        K = float(arg) if arg else 0.0

        def sd(t):
            return np.sqrt(v * np.maximum(T - t, 0.0) ** 3 / 3.0) / T

        def parts(t, J):
            s = sd(t)
            m = J[:, 0] / T - K
            live = s > 0
            ss = np.where(live, s, 1.0)
            with np.errstate(invalid="ignore"):
                dd = np.where(live, m / ss, np.sign(m) * np.inf)
            return s, m, live, ss, dd

        def f(t, J, x):
            s, m, live, ss, dd = parts(t, J)
            return np.where(live, s * norm.pdf(dd) + m * norm.cdf(dd), np.maximum(m, 0.0))

        def ft(t, J, x):
            s, m, live, ss, dd = parts(t, J)
            dsdt = -1.5 * np.sqrt(v / 3.0 * np.maximum(T - t, 0.0)) / T
            return np.where(live, norm.pdf(dd) * dsdt, 0.0)

        def fJ(t, J, x):
            s, m, live, ss, dd = parts(t, J)
            return np.where(live, norm.cdf(dd), (m > 0).astype(float)) / T

        def fJJ(t, J, x):
            s, m, live, ss, dd = parts(t, J)
            return np.where(live, norm.pdf(dd) / ss, 0.0) / T ** 2

        return AsianSpec(fid, f, ft, fJ, _zero, fJJ, _zero, _zero)
    raise KeyError(f"unknown asian payoff id {fid!r}")


def _col(v, d):
    out = np.zeros((np.size(v), d))
    out[:, 0] = v
    return out


def asian_functional(fid, T: float = 1.0, d: int = 1, v: float = 1.0) -> Cylinder:
    """``F(t, X) = f(t, J(t), X(t))`` as a cylinder ``(t, x, I)``.

    ``fid`` is a registered payoff id or an :class:`AsianSpec`.
    """
    s = fid if isinstance(fid, AsianSpec) else asian_spec(fid, T, v)

    def J_of(t, x, I):
        return I + (T - t)[:, None] * x

    def f(t, x, I):
        return s.f(t, J_of(t, x, I), x)

    # d/dt at fixed (x, I) picks up -x d_J f through J
    def f_t(t, x, I):
        J = J_of(t, x, I)
        return s.f_t(t, J, x) - s.f_J(t, J, x) * x[:, 0]

    def f_I(t, x, I):
        return _col(s.f_J(t, J_of(t, x, I), x), x.shape[1])

    def f_x(t, x, I):
        J = J_of(t, x, I)
        return _col((T - t) * s.f_J(t, J, x) + s.f_x(t, J, x), x.shape[1])

    def f_xx(t, x, I):
        J = J_of(t, x, I)
        tau = T - t
        h = tau ** 2 * s.f_JJ(t, J, x) + 2.0 * tau * s.f_Jx(t, J, x) + s.f_xx(t, J, x)
        out = np.zeros((t.size, x.shape[1], x.shape[1]))
        out[:, 0, 0] = h
        return out

    cyl = Cylinder(f, name=f"asian:{s.name}", regularity="C12", f_t=f_t, f_x=f_x,
                   f_I=f_I, f_xx=f_xx, T=T)
    cyl.asian = s
    return cyl


def asian_J(p: GridPath, T: Optional[float] = None, left: bool = False) -> np.ndarray:
    """``J(t_k)`` at every node, shape (n+1, d). The running integral is the
    exact left sum of the piecewise-constant path."""
    T = p.T if T is None else T
    t, x, I = node_states(p, left)
    return I + (T - t)[:, None] * x


def asian_derivatives(A: Cylinder, t: float, p: GridPath):
    """Analytic ``(DF, grad F)`` at ``t``: ``DF = d_t f`` and
    ``grad F = (T - t) grad_J f + grad_x f``."""
    return float(A.analytic_DF(t, p)), np.asarray(A.analytic_grad(t, p))


def asian_fd_check(A: Cylinder, p: GridPath, times, cfg: FDConfig = FDConfig()) -> float:
    """Largest gap between analytic and finite-difference ``DF``, ``grad F``."""
    worst = 0.0
    for t in times:
        q = stop(p, float(t))
        DF, g = asian_derivatives(A, float(t), q)
        DF_fd = horizontal_derivative(A, float(t), q, cfg).value
        g_fd = vertical_gradient(A, float(t), q, cfg).value
        worst = max(worst, abs(DF - DF_fd), float(np.max(np.abs(g - g_fd))))
    return worst


@dataclass
class AsianReport:
    """Accumulated bounded-variation residuals and the martingale check on J."""

    functional: str
    model: str
    n_steps: int
    bv: np.ndarray
    bv_terms: Dict[str, float]
    check_times: np.ndarray
    J_mean: np.ndarray
    J_se: np.ndarray
    J0: np.ndarray
    notes: List[str] = field(default_factory=list)

    @property
    def bv_rms(self) -> float:
        return float(np.sqrt(np.mean(self.bv ** 2))) if self.bv.size else 0.0

    @property
    def J_max_z(self) -> float:
        """Largest ``|mean J(t) - J(0)| / se`` over the check times."""
        se = np.where(self.J_se > 0, self.J_se, np.inf)
        return float(np.max(np.abs(self.J_mean - self.J0) / se))

    def J_constant(self, z: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.J_mean - self.J0) <= z * self.J_se + 1e-12))


def _drift_free_gap(triplet) -> float:
    pts, w = triplet.nu_points(small=False)
    big = w @ pts if len(w) else np.zeros(triplet.d)
    return float(np.max(np.abs(triplet.mu + big)))


def _asian_bv_path(A: Cylinder, model, lp: LevyPath, cfg: FDConfig) -> Dict[str, float]:
    from .verify import _PathData, _local_time_correction, _nu_sum, _projection_remainder

    tr = model.triplet
    pd = _PathData(A, lp, cfg)
    DF, grad, _ = A.analytic_along(lp.X, left=False)
    dt = pd.dt
    terms = {"horizontal": float(np.dot(DF[:-1], dt)),
             "drift": float(np.sum(grad[:-1] @ tr.mu * dt))}
    pts, w = tr.nu_points(small=False)
    terms["large_jump_intensity"] = _nu_sum(pd, grad, pts, w, lambda ks, xs, y: y, with_linear=False)
    terms["local_time_correction"] = _local_time_correction(pd, tr)
    terms["projection_remainder"] = _projection_remainder(pd, tr, grad)
    return {k: float(v) for k, v in terms.items()}


def asian_pricing_residual(A: Cylinder, model, n_paths: int, n_steps: int, seed: int,
                           n_bv_paths: Optional[int] = None, n_checks: int = 17,
                           cfg: FDConfig = FDConfig()) -> AsianReport:
    """Accumulated bounded-variation part of ``dF`` per path and the sample
    mean of ``J(t)`` at ``n_checks`` equally spaced times.

    The BV part is the horizontal term, the drift, the intensity of large
    jumps and the local-time correction (plus the projection remainder for
    a degenerate Gaussian part). It vanishes for a pricing function.
    """
    tr = model.triplet
    notes = []
    if model.kind != "levy":
        raise ValueError("the Asian identity needs a Levy model")
    gap = _drift_free_gap(tr)
    if gap > 1e-12:
        msg = f"model {model.name} is not driftless (mean rate {gap:.3g})"
        notes.append(msg)
        warnings.warn(msg, _hw(), stacklevel=2)
    if not np.all(np.isfinite(tr.second_moment())):
        msg = "jump measure has no finite second moment"
        notes.append(msg)
        warnings.warn(msg, _hw(), stacklevel=2)
    T = model.T
    ct = np.linspace(0.0, T, n_checks)
    Js = []
    n_bv = n_paths if n_bv_paths is None else min(n_bv_paths, n_paths)
    bv = np.zeros(n_bv)
    acc: Dict[str, float] = {}
    for i in range(n_paths):
        lp = model.simulate(n_steps, seed, i)
        X = lp.X
        J = asian_J(X, T)
        idx = np.searchsorted(X.times, ct * (1 + 1e-12), side="right") - 1
        Js.append(J[np.clip(idx, 0, X.times.size - 1), 0])
        if i < n_bv:
            terms = _asian_bv_path(A, model, lp, cfg)
            bv[i] = sum(terms.values())
            for k, v in terms.items():
                acc[k] = acc.get(k, 0.0) + v / n_bv
    Js = np.array(Js)
    mean = Js.mean(axis=0)
    se = Js.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.zeros(n_checks)
    return AsianReport(A.name, model.name, n_steps, bv, acc, ct, mean, se, Js[:, 0].mean(), notes)


def _hw():
    from .verify import HypothesisWarning
    return HypothesisWarning


# gamma-invariant functional

_GI_SUBSTEPS = 512


class GammaInvariantFunctional(PathFunctional):
    """``F(t, X) = f(Y(T))`` with ``Y`` the flow of ``dir`` from the path
    stopped at ``t``.

    State-form directions use RK4 with a fixed number of substeps on
    ``[t, T]``; other directions call the flow solver.
    """

    def __init__(self, f, grad_f, hess_f, dir: Direction, T: float, name: str = "gamma-invariant",
                 tol: float = 1e-10):
        self.f_, self.grad_f, self.hess_f = f, grad_f, hess_f
        self.dir, self.T, self.tol = dir, float(T), tol
        super().__init__(fn=self._eval, name=name, regularity="C12",
                         analytic_grad=lambda t, p: self.grad_f(self.forecast(t, p)),
                         analytic_hess=lambda t, p: self.hess_f(self.forecast(t, p)))

    def forecast_nodes(self, p: GridPath, left: bool = False) -> np.ndarray:
        """``Y(T)`` for every node of ``p`` at once, shape (n+1, d)."""
        if self.dir.state_fn is None:
            ts = p.times
            return np.vstack([self.forecast(float(t), p) for t in ts])
        t, x, I = node_states(p, left)
        if self.dir.ignores_jumps and p.jump_idx.size:
            _, xc, Ic = node_states(continuous_part(p), left)
        else:
            xc, Ic = x, I
        h = np.maximum(self.T - t, 0.0)
        y, _ = _flow_states(self.dir, t, x, I, xc, Ic, h, substeps=_GI_SUBSTEPS)
        return y

    def forecast(self, t: float, p: GridPath) -> np.ndarray:
        k = p.index(t)
        t = float(p.times[k])
        if self.dir.state_fn is None:
            if t >= self.T:
                return np.array(p.values[k])
            sol = solve_flow(self.dir, t, stop(p, t), tol=self.tol, t_end=self.T)
            return np.array(sol.path.values[-1])
        x = p.values[k][None, :]
        I = running_integral_nodes(p)[k][None, :]
        if self.dir.ignores_jumps and p.jump_idx.size:
            c = continuous_part(p)
            xc, Ic = c.values[k][None, :], running_integral_nodes(c)[k][None, :]
        else:
            xc, Ic = x, I
        y, _ = _flow_states(self.dir, np.array([t]), x, I, xc, Ic,
                            np.array([max(self.T - t, 0.0)]), substeps=_GI_SUBSTEPS)
        return y[0]

    def _eval(self, t, p):
        return float(self.f_(self.forecast(t, p)))

    def along(self, p: GridPath, left: bool = False) -> np.ndarray:
        Y = self.forecast_nodes(p, left)
        return np.array([float(self.f_(y)) for y in Y])


_GI_F = {
    "quad": (lambda y: float(np.dot(y, y)), lambda y: 2.0 * np.asarray(y, dtype=float),
             lambda y: 2.0 * np.eye(np.size(y))),
    "linear": (lambda y: float(np.sum(y)), lambda y: np.ones(np.size(y)),
               lambda y: np.zeros((np.size(y), np.size(y)))),
}


def gamma_invariant_functional(f, dir: Direction, T: float = 1.0, grad_f=None, hess_f=None,
                               name: Optional[str] = None) -> GammaInvariantFunctional:
    """``F(t, X) = f(X(t) + int_t^T gamma(s, Y) ds)``.

    ``f`` is a registered id ("quad", "linear") or a callable with its
    gradient ``grad_f`` (and optionally ``hess_f``). Directions that do not
    already ignore jumps are wrapped.
    """
    if isinstance(f, str):
        if f not in _GI_F:
            raise KeyError(f"unknown gamma-invariant payoff {f!r}")
        fid = f
        f, grad_f, hess_f = _GI_F[f]
    else:
        fid = getattr(f, "__name__", "f")
        if grad_f is None:
            raise ValueError("grad_f is required for a callable payoff")
    if not dir.ignores_jumps:
        dir = Direction("ignore-jump:" + dir.id, dir.nodes, dir.g, dir.bound_hint,
                        dir.state_fn, ignores_jumps=True)
    return GammaInvariantFunctional(f, grad_f, hess_f, dir, T,
                                    name=name or f"gamma-invariant:{fid},{dir.id}")


def gamma_invariant_from_id(arg: str, T: float = 1.0, d: int = 1) -> GammaInvariantFunctional:
    """Parse ``"f-id,gamma-id"``; the direction id may contain commas."""
    fid, _, gid = arg.partition(",")
    return gamma_invariant_functional(fid or "quad", make_direction(gid or "zero", d), T)


@dataclass
class GammaInvariantResidual:
    lhs: float
    terms: Dict[str, float]

    @property
    def residual(self) -> float:
        return abs(self.lhs - sum(self.terms.values()))


def verify_gamma_invariant(F: GammaInvariantFunctional, X: GridPath) -> GammaInvariantResidual:
    """Chain rule along a continuous path:
    ``f(X(T)) - f(Y^{0,X}(T)) = int grad F dX - int <grad F, gamma> dt
    + 1/2 int Tr(hess F d[X])`` with realized ``[X]`` and analytic
    ``grad F = grad f(Y(T))``."""
    from .verify import HypothesisViolation

    if X.jump_idx.size:
        raise HypothesisViolation("the chain rule for gamma-invariant functionals needs a continuous path")
    if np.any(np.asarray(F.dir.g(X.times)) > 0):
        warnings.warn(f"direction {F.dir.id} depends on the path: increments of X move the "
                      "forecast beyond grad f, so the chain rule is not expected to close",
                      _hw(), stacklevel=2)
    Y = F.forecast_nodes(X)
    vals = np.array([float(F.f_(y)) for y in Y])
    grad = np.vstack([F.grad_f(y) for y in Y])
    dX = np.diff(X.values, axis=0)
    dt = np.diff(X.times)
    gam = F.dir.nodes_on(X.times, X.values)
    terms = {"ito": float(np.einsum("ki,ki->", grad[:-1], dX)),
             "minus_gamma": -float(np.dot(np.einsum("ki,ki->k", grad[:-1], gam[:-1]), dt))}
    if F.hess_f is not None:
        H = np.array([F.hess_f(y) for y in Y[:-1]])
        terms["half_hessian_qv"] = 0.5 * float(np.einsum("kij,ki,kj->", H, dX, dX))
    return GammaInvariantResidual(float(vals[-1] - vals[0]), terms)
