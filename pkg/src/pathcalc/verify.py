"""Pathwise residuals of the Ito-type identities and the Monte Carlo harness.

Every identity is checked on one simulated path: the left side is
``F(T, X_{^T}) - F(0, X_0)`` and the right side is assembled term by term
from derivative estimators, partition sums, the jump ledger and exact
jump-measure sums. The residual is ``lhs - sum(terms)``.

Conventions on a grid with jumps at nodes:

* interval ``k`` is ``(t_k, t_{k+1}]``; integrands and ``dt`` terms use the
  path stopped at ``t_k`` (left point, after any jump at ``t_k``);
* jump terms iterate the ledger and use the pre-jump state ``X(t_k-)``;
* ``G_k(x)`` is ``F(t_k, .)`` on the path stopped at ``t_k-`` and moved to
  ``x`` at ``t_k``. Jump-measure integrals and the local-time correction are
  evaluated through ``G_k``.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .flow import Direction, gamma_derivative, gamma_derivative_along
from .functional import (Cylinder, FDConfig, PathFunctional, _richardson,
                         derivatives_along, running_integral_nodes)
from .levy import (JumpComponent, LevyPath, LevyTriplet, LevyTypeCoefficients,
                   SimGrid, coarsen, gaussian_approx_family, path_rng, simulate,
                   simulate_levy_type, triplet_from_config)
from .localtime import LocalTimeContext, SpaceFunction, gauss_legendre_01, local_time_integral
from .pathspace import GridPath, bump, stop, stop_pre

__all__ = [
    "HypothesisWarning",
    "HypothesisViolation",
    "FormulaSpec",
    "FORMULAS",
    "Model",
    "make_model",
    "model_from_config",
    "PathResidual",
    "ResidualReport",
    "residual",
    "jump_bookkeeping",
    "mc_report",
    "gaussian_limit_experiment",
    "worker_count",
]


class HypothesisWarning(UserWarning):
    """A formula is applied outside its stated hypotheses."""


class HypothesisViolation(ValueError):
    """The model cannot supply what a formula needs."""


# formula registry

@dataclass(frozen=True)
class FormulaSpec:
    id: str
    description: str
    terms: tuple
    regularity: str
    model_kind: Optional[str] = None
    needs_direction: bool = False
    continuous_only: bool = False


FORMULAS: Dict[str, FormulaSpec] = {f.id: f for f in [
    FormulaSpec("cont-ito", "functional Ito formula for continuous semimartingales",
                ("horizontal", "ito", "half_hessian_qv"), "C12", continuous_only=True),
    FormulaSpec("cadlag-ito", "functional Ito formula for cadlag semimartingales",
                ("horizontal", "ito", "half_hessian_qv_cont", "jump_remainder"), "C12"),
    FormulaSpec("strat", "functional Stratonovich formula",
                ("horizontal", "stratonovich", "jump_remainder"), "C12"),
    FormulaSpec("levy-type", "functional Ito formula for Levy-type integrals",
                ("horizontal", "drift", "diffusion", "half_hessian_model", "large_jumps",
                 "small_jumps_compensated", "small_jump_compensator"), "C12", "levy-type"),
    FormulaSpec("levy", "functional Ito formula for Levy processes",
                ("horizontal", "drift", "brownian", "half_hessian_model", "large_jumps",
                 "small_jumps_compensated", "small_jump_compensator"), "C12", "levy"),
    FormulaSpec("local-time-ito", "local-time Ito formula for C1 functions of a Levy process",
                ("drift", "brownian", "large_jumps", "small_jumps_compensated",
                 "local_time_correction", "projection_remainder"), "C11", "levy"),
    FormulaSpec("optimal", "local-time functional Ito formula for Levy processes (C11)",
                ("horizontal", "drift", "brownian", "large_jumps", "small_jumps_compensated",
                 "local_time_correction", "projection_remainder"), "C11", "levy"),
    FormulaSpec("gamma-optimal", "local-time formula with the gamma-directional derivative",
                ("gamma_derivative", "drift_minus_gamma", "brownian", "large_jumps",
                 "small_jumps_compensated", "local_time_correction", "projection_remainder"),
                "C01", "levy", needs_direction=True),
    FormulaSpec("gamma-strat", "Stratonovich formula with the gamma-directional derivative",
                ("gamma_derivative", "minus_gamma", "stratonovich", "jump_remainder"),
                "C12", needs_direction=True),
    FormulaSpec("asian", "Asian pricing identity: bounded-variation part of dF vanishes",
                ("see apps.asian_pricing_residual",), "C11", "levy"),
    FormulaSpec("gamma-invariant", "chain rule for functionals constant along gamma flows",
                ("see apps.verify_gamma_invariant",), "C12", needs_direction=True,
                continuous_only=True),
]}

_REG_ORDER = {"C00": 0, "C01": 1, "C11": 2, "C12": 3}


# models

@dataclass
class Model:
    """A Levy triplet (``kind="levy"``) or Levy-type coefficients driven by a
    noise triplet (``kind="levy-type"``)."""

    triplet: LevyTriplet
    kind: str = "levy"
    coeffs: Optional[LevyTypeCoefficients] = None
    T: float = 1.0
    name: str = "model"

    @property
    def d(self) -> int:
        return self.triplet.d

    def simulate(self, n_steps: int, seed: int, path_index: int) -> LevyPath:
        grid = SimGrid(n_steps, self.T, seed=seed)
        if self.kind == "levy-type":
            return simulate_levy_type(self.coeffs, self.triplet, grid, path_index=path_index)
        return simulate(self.triplet, grid, path_index=path_index)


def _linear_levy_type(d, a=0.0, b=0.0, s=1.0, h=1.0, rate=2.0, atom=1.0, large=None):
    """dX = (a - b X) dt + s dB + K dN + h y dN~ with unit atoms."""
    atoms = [[atom] * d, [-atom] * d]
    comps = [JumpComponent(rate, "atom", {"atoms": atoms}, d=d)] if rate > 0 else []
    if large:
        comps.append(JumpComponent(float(large), "atom",
                                   {"atoms": [[2.0] * d, [-2.0] * d]}, d=d))
    noise = LevyTriplet(np.zeros(d), np.eye(d), comps, name="noise")
    co = LevyTypeCoefficients(
        G=lambda t, x: a - b * x,
        L=lambda t, x: s * np.eye(d),
        K=lambda t, y, x: 0.5 * y,
        H=lambda t, y, x: h * y,
        H_bound=abs(h) * np.sqrt(d) * atom,
    )
    return co, noise


def model_from_config(cfg: dict, T: float = 1.0) -> Model:
    """``{"type": "bm"|"levy"|"levy-type"|"eps-family", ...}``."""
    kind = cfg.get("type", "levy")
    if kind == "bm":
        d = int(cfg.get("d", 1))
        return Model(LevyTriplet(np.zeros(d), np.eye(d), [], name="bm"), T=T, name="bm")
    if kind == "eps-family":
        return Model(gaussian_approx_family(float(cfg["eps"]), int(cfg.get("d", 1))), T=T,
                     name=f"eps-family:{cfg['eps']}")
    if kind == "levy":
        tr = triplet_from_config(cfg)
        return Model(tr, T=T, name=cfg.get("name", "levy"))
    if kind == "levy-type":
        d = int(cfg.get("d", 1))
        p = {k: cfg[k] for k in ("a", "b", "s", "h", "rate", "atom", "large") if k in cfg}
        co, noise = _linear_levy_type(d, **p)
        return Model(noise, kind="levy-type", coeffs=co, T=T, name="levy-type:linear")
    raise KeyError(f"unknown model type {kind!r}")


MODEL_IDS = ("bm", "bm:d", "jump-diffusion", "compound-poisson", "eps-family:eps",
             "levy-type", "rank-deficient")

MODEL_DOCS = {
    "bm": "standard Brownian motion in d dimensions",
    "bm:d": "standard Brownian motion in d dimensions",
    "jump-diffusion": "Brownian motion plus rate-2 jumps of size +-1 per coordinate",
    "compound-poisson": "rate-2 jumps of size +-1, compensated, no Gaussian part",
    "eps-family:eps": "pure-jump surrogate of Brownian motion with atoms +-eps",
    "levy-type": "dX = -X/2 dt + dB + jumps driven by unit atoms, plus size-2 jumps",
    "rank-deficient": "two coordinates with Brownian noise in the first only, plus jumps",
}


def make_model(spec: str, d: int = 1, T: float = 1.0) -> Model:
    """Named models used by the CLI and tests."""
    head, _, arg = spec.partition(":")
    if head == "bm":
        return model_from_config({"type": "bm", "d": int(arg or d)}, T)
    if head == "jump-diffusion":
        # unit-variance Brownian part plus rate-2 jumps of size +-1
        return model_from_config({"mu": [0.0] * d, "sigma": np.eye(d).tolist(),
                                  "jumps": [{"rate": 2.0, "dist": "atom",
                                             "params": {"atoms": [[1.0] * d, [-1.0] * d]}}],
                                  "name": "jump-diffusion"}, T)
    if head == "compound-poisson":
        return model_from_config({"mu": [0.0] * d, "sigma": np.zeros((d, d)).tolist(),
                                  "jumps": [{"rate": 2.0, "dist": "atom",
                                             "params": {"atoms": [[1.0] * d, [-1.0] * d]}}],
                                  "name": "compound-poisson"}, T)
    if head == "eps-family":
        return model_from_config({"type": "eps-family", "eps": float(arg), "d": d}, T)
    if head == "levy-type":
        return model_from_config({"type": "levy-type", "d": d, "b": 0.5, "large": 0.5}, T)
    if head == "rank-deficient":
        # two coordinates, Brownian noise in the first one only
        return model_from_config({"mu": [0.1, 0.0], "sigma": [[1.0, 0.0], [0.0, 0.0]],
                                  "jumps": [{"rate": 1.0, "dist": "atom",
                                             "params": {"atoms": [[0.5, 0.5], [-0.5, 0.25]]}}],
                                  "name": "rank-deficient"}, T)
    raise KeyError(f"unknown model id {spec!r}")


# per-path machinery

class _PathData:
    """Node states of ``F`` along one path, with lazily computed derivatives."""

    def __init__(self, F: PathFunctional, lp: LevyPath, cfg: FDConfig):
        self.F, self.lp, self.cfg = F, lp, cfg
        X = lp.X
        self.X = X
        self.t = np.array(X.times)
        self.dt = np.diff(self.t)
        self.n = self.dt.size
        self.x = np.array(X.values)
        self.xpre = X.left_values()
        self.I = running_integral_nodes(X)
        self.cyl = isinstance(F, Cylinder)
        self._der = None
        self._stops = {}

    # G_k(x) = F(t_k, path stopped at t_k- and moved to x at t_k)
    def G(self, ks, xs) -> np.ndarray:
        ks = np.asarray(ks, dtype=int)
        xs = np.asarray(xs, dtype=float).reshape(ks.size, -1)
        if self.cyl:
            return self.F.node_eval(self.t[ks], xs, self.I[ks])
        out = np.empty(ks.size)
        for j, (k, xv) in enumerate(zip(ks, xs)):
            tk = float(self.t[k])
            base = self._stops.get(k)
            if base is None:
                base = stop_pre(self.X, tk)
                if len(self._stops) < 4096:
                    self._stops[k] = base
            out[j] = self.F(tk, bump(base, tk, xv - self.xpre[k]))
        return out

    def gradG(self, ks, xs) -> np.ndarray:
        ks = np.asarray(ks, dtype=int)
        xs = np.asarray(xs, dtype=float).reshape(ks.size, -1)
        d = xs.shape[1]
        h0 = self.cfg.h0 if self.cfg.h0 is not None else None
        scale = 1.0 + np.max(np.abs(xs), axis=1) if xs.size else np.ones(0)
        hb = np.full(ks.size, h0) if h0 is not None else 1e-5 * scale
        levels = []
        for j in range(self.cfg.richardson_levels + 1):
            h = hb / 2.0 ** j
            g = np.empty((ks.size, d))
            for i in range(d):
                e = np.zeros(d)
                e[i] = 1.0
                g[:, i] = (self.G(ks, xs + h[:, None] * e) - self.G(ks, xs - h[:, None] * e)) / (2 * h)
            levels.append(g)
        v, _, _ = _richardson(levels, order=2, step_order=2)
        return np.asarray(v)

    def derivatives(self, hessian: bool):
        if self._der is None or (hessian and not self._der[1]):
            self._der = (derivatives_along(self.F, self.X, self.cfg, left=False, hessian=hessian), hessian)
        return self._der[0]

    def values(self):
        return self.F.along(self.X, left=False)

    # ledger helpers
    def ledger_nodes(self):
        led = self.lp.ledger
        return np.asarray(led.idx, dtype=int), np.asarray(led.sizes, dtype=float).reshape(len(led), self.X.d)


def _nu_sum(pd: _PathData, grad, pts, w, shift: Callable, with_linear: bool, project=None):
    """``sum_k dt_k sum_p w_p (G_k(x_k + s_p) - G_k(x_k) [- g_k . s_p])``
    with ``s_p = shift(p)``; ``project`` replaces the base point by
    ``x_k + project(y)``."""
    ks = np.arange(pd.n)
    xk = pd.x[:-1]
    base = pd.G(ks, xk)
    tot = 0.0
    for y, wy in zip(pts, w):
        s = shift(ks, xk, y)
        v = pd.G(ks, xk + s)
        if project is not None:
            v = v - pd.G(ks, xk + project(y))
        else:
            v = v - base
        if with_linear:
            v = v - np.einsum("ki,ki->k", grad[:-1], s * np.ones_like(xk))
        tot += wy * float(np.dot(pd.dt, v))
    return tot


def _jump_sum(pd: _PathData, sel: Callable, linear_grad: bool = False):
    """Sum over ledger entries selected by ``sel(y)`` of
    ``G_k(post) - G_k(pre)`` (minus ``<grad G_k(pre), post - pre>``)."""
    ks, ys = pd.ledger_nodes()
    if ks.size == 0:
        return 0.0
    mask = np.array([sel(y) for y in ys], dtype=bool)
    ks = ks[mask]
    if ks.size == 0:
        return 0.0
    pre, post = pd.xpre[ks], pd.x[ks]
    v = pd.G(ks, post) - pd.G(ks, pre)
    if linear_grad:
        v = v - np.einsum("ki,ki->k", pd.gradG(ks, pre), post - pre)
    return float(np.sum(v))


def _is_small(y) -> bool:
    return float(np.linalg.norm(y)) <= 1.0


def _is_large(y) -> bool:
    return float(np.linalg.norm(y)) > 1.0


def _local_time_correction(pd: _PathData, triplet: LevyTriplet, diffusion_coeff: float = 0.5):
    """Minus the local-time pairing of ``A I G~`` summed over Brownian coordinates.

    ``A_i I_i G~(b) = c d_iG~(b) + int int_0^1 (G~(b + sRy) - G~(b)) (Ry)_i ds nu(dy)``
    with ``G~(b) = G(S b + N)``, so ``d_iG~ = (S^T grad G)_i`` and
    ``G~(b + sRy) = G(x + sQy)``.
    """
    m = triplet.m
    if m == 0:
        return 0.0
    S, R, Q = triplet.sigma_half, triplet.R, triplet.Q
    pts, w = triplet.nu_points(small=True)
    s_gl, w_gl = gauss_legendre_01()
    times = pd.t

    def make_phi(i):
        def f(t, b, n):
            t = np.asarray(t).reshape(-1)
            ks = np.clip(np.searchsorted(times, t), 0, pd.n)
            xs = np.asarray(b).reshape(t.size, -1) @ S.T + np.asarray(n).reshape(t.size, -1)
            out = diffusion_coeff * (pd.gradG(ks, xs) @ S[:, i])
            if len(w):
                g0 = pd.G(ks, xs)
                for y, wy in zip(pts, w):
                    Qy, Ry = Q @ y, R @ y
                    if Ry[i] == 0.0:
                        continue
                    acc = np.zeros(t.size)
                    for sk, wk in zip(s_gl, w_gl):
                        acc += wk * (pd.G(ks, xs + sk * Qy) - g0)
                    out = out + wy * Ry[i] * acc
            return out
        return SpaceFunction(f, name=f"AIG{i}")

    ctx = LocalTimeContext(pd.lp.B, pd.lp.N_res, S, R, Q)
    return -sum(local_time_integral(make_phi(i), ctx, i) for i in range(m))


def _projection_remainder(pd: _PathData, triplet: LevyTriplet, grad):
    if triplet.m == triplet.d:
        return 0.0
    pts, w = triplet.nu_points(small=True)
    if len(w) == 0:
        return 0.0
    Q = triplet.Q
    IQ = np.eye(triplet.d) - Q
    ks = np.arange(pd.n)
    xk = pd.x[:-1]
    tot = 0.0
    for y, wy in zip(pts, w):
        v = pd.G(ks, xk + y) - pd.G(ks, xk + Q @ y) - grad[:-1] @ (IQ @ y)
        tot += wy * float(np.dot(pd.dt, v))
    return tot


def _grad_path_cont_cov(pd: _PathData, grad):
    """Continuous part of ``sum_i [d_iF(., X), X^i]`` from partition sums."""
    dX = np.diff(pd.x, axis=0)
    tot = float(np.einsum("ki,ki->", np.diff(grad, axis=0), dX))
    ji = np.asarray(pd.X.jump_idx, dtype=int)
    if ji.size:
        gpre = pd.gradG(ji, pd.xpre[ji])
        tot -= float(np.einsum("ki,ki->", grad[ji] - gpre, pd.x[ji] - pd.xpre[ji]))
    return tot


def _check_hypotheses(spec: FormulaSpec, F: PathFunctional, model: Model, lp: LevyPath,
                      direction: Optional[Direction]) -> List[str]:
    notes = []
    if _REG_ORDER[F.regularity] < _REG_ORDER[spec.regularity]:
        notes.append(f"{spec.id}: functional {F.name} is tagged {F.regularity}, "
                     f"the identity assumes {spec.regularity}")
    if spec.continuous_only and lp.X.jump_idx.size:
        notes.append(f"{spec.id}: path has {lp.X.jump_idx.size} jumps but the identity "
                     "assumes continuous paths")
    if spec.model_kind and model.kind != spec.model_kind:
        raise HypothesisViolation(f"{spec.id} needs a {spec.model_kind} model, got {model.kind}")
    if spec.needs_direction and direction is None:
        raise HypothesisViolation(f"{spec.id} needs a direction")
    if spec.model_kind == "levy" and model.triplet.m < model.d:
        pts, w = model.triplet.nu_points(small=True)
        IQ = np.eye(model.d) - model.triplet.Q
        if len(w) and not np.isfinite(float(w @ np.linalg.norm(pts @ IQ.T, axis=1))):
            raise HypothesisViolation("small jumps outside the Gaussian range are not integrable")
    return notes


@dataclass
class PathResidual:
    formula: str
    path_index: int
    n_steps: int
    lhs: float
    terms: Dict[str, float]
    warnings: List[str] = field(default_factory=list)
    unstable: bool = False

    @property
    def residual(self) -> float:
        return self.lhs - sum(self.terms.values())


def residual(formula: str, F: PathFunctional, model: Model, lp: LevyPath,
             cfg: FDConfig = FDConfig(), direction: Optional[Direction] = None,
             qv: str = "realized", path_index: int = 0, n_steps: Optional[int] = None) -> PathResidual:
    """Residual of one identity on one simulated path.

    ``qv`` selects ``[X]`` in the continuous formula: ``"realized"`` uses the
    partition sums of the path, ``"model"`` uses ``Sigma dt``.
    """
    if formula not in FORMULAS:
        raise KeyError(f"unknown formula id {formula!r}")
    spec = FORMULAS[formula]
    if formula in ("asian", "gamma-invariant"):
        raise HypothesisViolation(f"{formula} has its own driver in pathcalc.apps")
    notes = _check_hypotheses(spec, F, model, lp, direction)
    for msg in notes:
        warnings.warn(msg, HypothesisWarning, stacklevel=2)
    pd = _PathData(F, lp, cfg)
    tr = model.triplet
    vals = pd.values()
    lhs = float(vals[-1] - vals[0])
    need_hess = formula in ("cont-ito", "cadlag-ito", "levy", "levy-type")
    der = pd.derivatives(need_hess)
    DF, grad, hess = der["DF"], der["grad"], der["hess"]
    dt, dX = pd.dt, np.diff(pd.x, axis=0)
    terms: Dict[str, float] = {}
    ito = float(np.einsum("ki,ki->", grad[:-1], dX))
    hor = float(np.dot(DF[:-1], dt))

    if formula == "cont-ito":
        terms["horizontal"] = hor
        terms["ito"] = ito
        if qv == "realized":
            terms["half_hessian_qv"] = 0.5 * float(np.einsum("kij,ki,kj->", hess[:-1], dX, dX))
        else:
            cov = tr.sigma if model.kind == "levy" else tr.sigma_half @ tr.sigma_half.T
            terms["half_hessian_qv"] = 0.5 * float(np.dot(np.einsum("kij,ij->k", hess[:-1], cov), dt))
    elif formula == "cadlag-ito":
        J = np.zeros_like(pd.x)
        ji = np.asarray(pd.X.jump_idx, dtype=int)
        J[ji] = pd.x[ji] - pd.xpre[ji]
        dc = dX[:, :, None] * dX[:, None, :] - J[1:, :, None] * J[1:, None, :]
        terms["horizontal"] = hor
        terms["ito"] = ito
        terms["half_hessian_qv_cont"] = 0.5 * float(np.einsum("kij,kij->", hess[:-1], dc))
        terms["jump_remainder"] = _jump_sum(pd, lambda y: True, linear_grad=True)
    elif formula in ("strat", "gamma-strat"):
        if formula == "strat":
            terms["horizontal"] = hor
        else:
            dg = _gamma_along(F, direction, lp.X, cfg)
            gam = direction.nodes_on(pd.t, pd.x, pd.X.jump_idx, pd.X.pre)
            terms["gamma_derivative"] = float(np.dot(dg[:-1], dt))
            terms["minus_gamma"] = -float(np.dot(np.einsum("ki,ki->k", grad[:-1], gam[:-1]), dt))
        terms["stratonovich"] = ito + 0.5 * _grad_path_cont_cov(pd, grad)
        terms["jump_remainder"] = _jump_sum(pd, lambda y: True, linear_grad=True)
    elif formula == "levy-type":
        co = model.coeffs
        xk = pd.x[:-1]
        Gc = np.array([np.asarray(co.G(t, x), dtype=float) for t, x in zip(pd.t[:-1], xk)]).reshape(pd.n, -1)
        Lc = np.array([np.asarray(co.L(t, x), dtype=float).reshape(tr.d, -1) for t, x in zip(pd.t[:-1], xk)])
        dB = np.diff(lp.B.values, axis=0)
        terms["horizontal"] = hor
        terms["drift"] = float(np.dot(np.einsum("ki,ki->k", grad[:-1], Gc), dt))
        terms["diffusion"] = float(np.einsum("ki,kij,kj->", grad[:-1], Lc, dB)) if dB.shape[1] else 0.0
        LL = np.einsum("kij,klj->kil", Lc, Lc)
        terms["half_hessian_model"] = 0.5 * float(np.dot(np.einsum("kij,kij->k", hess[:-1], LL), dt))
        terms["large_jumps"] = _jump_sum(pd, _is_large)
        pts, w = tr.nu_points(small=True)

        def hshift(ks, xs, y):
            return np.array([np.asarray(co.H(pd.t[k], y, x), dtype=float) for k, x in zip(ks, xs)])
        comp = _nu_sum(pd, grad, pts, w, hshift, with_linear=False)
        terms["small_jumps_compensated"] = _jump_sum(pd, _is_small) - comp
        terms["small_jump_compensator"] = _nu_sum(pd, grad, pts, w, hshift, with_linear=True)
    else:
        # Levy-process formulas
        mu, S = tr.mu, tr.sigma_half
        dB = np.diff(lp.B.values, axis=0)
        brown = float(np.einsum("ki,ij,kj->", grad[:-1], S, dB)) if tr.m else 0.0
        pts, w = tr.nu_points(small=True)
        add = (lambda ks, xs, y: y)
        comp = _nu_sum(pd, grad, pts, w, add, with_linear=False)
        small = _jump_sum(pd, _is_small) - comp
        large = _jump_sum(pd, _is_large)
        if formula == "levy":
            terms["horizontal"] = hor
            terms["drift"] = float(np.sum(grad[:-1] @ mu * dt))
            terms["brownian"] = brown
            terms["half_hessian_model"] = 0.5 * float(np.dot(np.einsum("kij,ij->k", hess[:-1], tr.sigma), dt))
            terms["large_jumps"] = large
            terms["small_jumps_compensated"] = small
            terms["small_jump_compensator"] = _nu_sum(pd, grad, pts, w, add, with_linear=True)
        else:
            if formula == "optimal":
                terms["horizontal"] = hor
                terms["drift"] = float(np.sum(grad[:-1] @ mu * dt))
            elif formula == "gamma-optimal":
                dg = _gamma_along(F, direction, lp.X, cfg)
                gam = direction.nodes_on(pd.t, pd.x, pd.X.jump_idx, pd.X.pre)
                terms["gamma_derivative"] = float(np.dot(dg[:-1], dt))
                terms["drift_minus_gamma"] = float(np.dot(np.einsum("ki,ki->k", grad[:-1], mu - gam[:-1]), dt))
            else:
                terms["drift"] = float(np.sum(grad[:-1] @ mu * dt))
            terms["brownian"] = brown
            terms["large_jumps"] = large
            terms["small_jumps_compensated"] = small
            terms["local_time_correction"] = _local_time_correction(pd, tr)
            terms["projection_remainder"] = _projection_remainder(pd, tr, grad)
    terms = {k: float(v) for k, v in terms.items()}
    return PathResidual(formula, path_index, n_steps if n_steps is not None else pd.n,
                        lhs, terms, notes, bool(der["unstable"]))


def _gamma_along(F, direction, X, cfg):
    if isinstance(F, Cylinder) and direction.state_fn is not None:
        return gamma_derivative_along(F, direction, X, cfg, left=False)
    out = np.zeros(X.times.size)
    for k, t in enumerate(X.times[:-1]):
        out[k] = gamma_derivative(F, direction, float(t), stop(X, float(t)), cfg).value
    out[-1] = out[-2] if out.size > 1 else 0.0
    return out


def jump_bookkeeping(F: PathFunctional, lp: LevyPath, cfg: FDConfig = FDConfig()) -> float:
    """Largest gap between the jump term computed from path values and the
    same term recomputed from the ledger sizes alone."""
    pd = _PathData(F, lp, cfg)
    ks, ys = pd.ledger_nodes()
    if ks.size == 0:
        return 0.0
    pre = pd.xpre[ks]
    g = pd.gradG(ks, pre)
    from_path = pd.G(ks, pd.x[ks]) - pd.G(ks, pre) - np.einsum("ki,ki->k", g, pd.x[ks] - pre)
    from_ledger = pd.G(ks, pre + ys) - pd.G(ks, pre) - np.einsum("ki,ki->k", g, ys)
    return float(abs(np.sum(from_path) - np.sum(from_ledger)))


# Monte Carlo harness

def worker_count(default: int = 1) -> int:
    """Worker cap from ``PATHCALC_THREADS``."""
    try:
        return max(1, int(os.environ.get("PATHCALC_THREADS", default)))
    except ValueError:
        return default


@dataclass
class ResidualReport:
    formula: str
    functional: str
    model: str
    n_paths: int
    steps_list: List[int]
    seed: int
    rows: List[PathResidual]
    warnings: List[str] = field(default_factory=list)

    def residuals(self, n_steps: int) -> np.ndarray:
        return np.array([r.residual for r in self.rows if r.n_steps == n_steps])

    def rms(self, n_steps: int) -> float:
        r = self.residuals(n_steps)
        return float(np.sqrt(np.mean(r ** 2))) if r.size else float("nan")

    @property
    def rms_by_steps(self) -> Dict[int, float]:
        return {n: self.rms(n) for n in self.steps_list}

    def term_means(self, n_steps: int) -> Dict[str, float]:
        rows = [r for r in self.rows if r.n_steps == n_steps]
        if not rows:
            return {}
        return {k: float(np.mean([r.terms[k] for r in rows])) for k in rows[0].terms}

    @property
    def trend_decreasing(self) -> bool:
        v = [self.rms(n) for n in sorted(self.steps_list)]
        return all(b < a for a, b in zip(v, v[1:]))

    @property
    def unstable(self) -> bool:
        return any(r.unstable for r in self.rows)


def mc_report(formula: str, F: PathFunctional, model: Model, n_paths: int,
              steps_list: Sequence[int] = (2 ** 10, 2 ** 12, 2 ** 14), seed: int = 0,
              direction: Optional[Direction] = None, cfg: FDConfig = FDConfig(),
              qv: str = "realized", workers: Optional[int] = None) -> ResidualReport:
    """Residuals over ``n_paths`` paths at each step count.

    Levy paths are simulated once at the finest step count and restricted to
    coarser grids, so the trend compares the same trajectories. Output does
    not depend on the number of workers.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    steps = sorted(int(s) for s in steps_list)
    workers = worker_count() if workers is None else max(1, int(workers))

    def one(i):
        out = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HypothesisWarning)
            if model.kind == "levy":
                fine = model.simulate(steps[-1], seed, i)
                for n in steps:
                    lp = fine if n == steps[-1] else coarsen(fine, n)
                    out.append(residual(formula, F, model, lp, cfg, direction, qv, i, n))
            else:
                for n in steps:
                    lp = model.simulate(n, seed, i)
                    out.append(residual(formula, F, model, lp, cfg, direction, qv, i, n))
        return out

    if workers == 1:
        results = [one(i) for i in range(n_paths)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(n_paths)))
    rows = [r for res in results for r in res]
    notes = sorted({w for r in rows for w in r.warnings})
    return ResidualReport(formula, F.name, model.name, n_paths, steps, seed, rows, notes)


# Gaussian approximation experiment

def _terminal_state_cp(triplet: LevyTriplet, T: float, rng):
    """Exact ``(X(T), int_0^T X ds)`` of a driftless-compensated compound
    Poisson path."""
    from .levy import _jump_schedule
    jt, jy, _ = _jump_schedule(triplet, T, rng)
    drift = triplet.mu - triplet.compensator()
    x = drift * T + jy.sum(axis=0)
    I = drift * T ** 2 / 2 + ((T - jt)[:, None] * jy).sum(axis=0)
    return x, I


def gaussian_limit_experiment(F: PathFunctional, eps_list: Sequence[float], n_paths: int,
                              seed: int = 0, T: float = 1.0, d: int = 1, n_steps: int = 256,
                              target: Optional[float] = None) -> dict:
    """``E F(T, X^eps)`` for the pure-jump surrogates against the Brownian value.

    Cylinder functionals use the exact terminal state; other functionals use
    paths on ``n_steps`` grids. Also reports Monte Carlo estimates of
    ``E F(T, B)`` and of ``E Z(T)`` where ``Z`` is the Ito expansion along
    Brownian paths. ``target`` is an exact Brownian value when known.
    """
    rows = []
    for j, eps in enumerate(eps_list):
        tr = gaussian_approx_family(float(eps), d)
        vals = np.empty(n_paths)
        for i in range(n_paths):
            rng = path_rng(seed + 7919 * (j + 1), i)
            if isinstance(F, Cylinder):
                x, I = _terminal_state_cp(tr, T, rng)
                vals[i] = F.node_eval(np.array([T]), x[None, :], I[None, :])[0]
            else:
                lp = simulate(tr, SimGrid(n_steps, T), rng=rng)
                vals[i] = F(T, lp.X)
        rows.append({"eps": float(eps), "mean": float(vals.mean()),
                     "se": float(vals.std(ddof=1) / np.sqrt(n_paths))})
    # Brownian reference, exact joint law of (B(T), int B)
    bvals = np.empty(n_paths)
    cov = np.array([[T, T ** 2 / 2], [T ** 2 / 2, T ** 3 / 3]])
    Lc = np.linalg.cholesky(cov)
    for i in range(n_paths):
        rng = path_rng(seed, i)
        if isinstance(F, Cylinder):
            z = rng.standard_normal((2, d))
            xI = Lc @ z
            bvals[i] = F.node_eval(np.array([T]), xI[0][None, :], xI[1][None, :])[0]
        else:
            bm = LevyTriplet(np.zeros(d), np.eye(d))
            bvals[i] = F(T, simulate(bm, SimGrid(n_steps, T), rng=rng).X)
    # Ito expansion along Brownian paths
    zvals = np.empty(min(n_paths, 2000))
    bm = LevyTriplet(np.zeros(d), np.eye(d))
    for i in range(zvals.size):
        X = simulate(bm, SimGrid(n_steps, T), rng=path_rng(seed + 1, i)).X
        der = derivatives_along(F, X, FDConfig(), left=False, hessian=True)
        dt = np.diff(X.times)
        tr_h = np.trace(der["hess"], axis1=1, axis2=2)
        zvals[i] = (F(0.0, X) + float(np.dot(der["DF"][:-1] + 0.5 * tr_h[:-1], dt))
                    + float(np.einsum("ki,ki->", der["grad"][:-1], np.diff(X.values, axis=0))))
    ref = float(bvals.mean()) if target is None else float(target)
    for r in rows:
        r["gap"] = abs(r["mean"] - ref)
    return {"rows": rows,
            "brownian_mean": float(bvals.mean()),
            "brownian_se": float(bvals.std(ddof=1) / np.sqrt(n_paths)),
            "ito_expansion_mean": float(zvals.mean()),
            "ito_expansion_se": float(zvals.std(ddof=1) / np.sqrt(zvals.size)),
            "reference": ref}
