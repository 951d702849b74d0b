"""Integrals against Brownian local time and the operators built on them.

The local-time integral of ``f`` in coordinate ``i`` is a forward left-point
sum on ``B`` plus a left-point sum on the time-reversed path, both over the
same nodes. On interval ``k`` the reversed sum contributes
``-f(B_{k+1}) dB_k``; time, the residual ``N`` and the other Brownian
coordinates are held at their left-node values (``freeze=True``), so only
coordinate ``i`` moves and constants cancel exactly.

Space functions have signature ``f(t, b, n)`` with ``t`` of shape ``(...)``,
``b`` of shape ``(..., m)`` and ``n`` of shape ``(..., d)``, returning
``(...)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .levy import LevyTriplet, LevyPath, path_rng
from .pathspace import GridPath

__all__ = [
    "SpaceFunction",
    "LocalTimeContext",
    "local_time_integral",
    "local_time_batch",
    "op_I",
    "op_A",
    "op_AI",
    "op_L",
    "LBoundReport",
    "check_L_bound",
    "gauss_legendre_01",
]

QUAD_TOL = 1e-10
GL_NODES = 16


def gauss_legendre_01(n: int = GL_NODES):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass
class SpaceFunction:
    """``f(t, b, n)`` with optional analytic ``grad(t, b, n) -> (..., m)``."""

    f: Callable
    grad: Optional[Callable] = None
    name: str = "f"

    def __call__(self, t, b, n=None):
        b = np.asarray(b, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), b.shape[:-1])
        if n is None:
            n = np.zeros(b.shape[:-1] + (1,))
        return np.asarray(self.f(t, b, n), dtype=float) * np.ones(b.shape[:-1])

    @classmethod
    def of_b(cls, fn, grad=None, name="f"):
        """Wrap a time- and N-independent ``fn(b)``."""
        g = None if grad is None else (lambda t, b, n: grad(b))
        return cls(lambda t, b, n: fn(b), g, name)

    def partial(self, t, b, n, i: int, h: Optional[np.ndarray] = None):
        """``d f / d b_i``: analytic when available, else central difference."""
        b = np.asarray(b, dtype=float)
        if self.grad is not None:
            t = np.broadcast_to(np.asarray(t, dtype=float), b.shape[:-1])
            return np.asarray(self.grad(t, b, n), dtype=float)[..., i] * np.ones(b.shape[:-1])
        if h is None:
            h = 1e-5 * (1.0 + np.abs(b[..., i]))
        e = np.zeros(b.shape[-1])
        e[i] = 1.0
        hh = np.asarray(h)[..., None]
        return (self(t, b + hh * e, n) - self(t, b - hh * e, n)) / (2 * h)


@dataclass
class LocalTimeContext:
    """Brownian coordinates, jump residual and transport matrices of a path."""

    B: GridPath
    N_res: GridPath
    sigma_half: np.ndarray
    R: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_levy(cls, lp: LevyPath, triplet: LevyTriplet) -> "LocalTimeContext":
        return cls(lp.B, lp.N_res, triplet.sigma_half, triplet.R, triplet.Q)

    @classmethod
    def brownian(cls, B: GridPath) -> "LocalTimeContext":
        m = B.d
        return cls(B, GridPath(B.times, np.zeros((B.times.size, m))), np.eye(m), np.eye(m), np.eye(m))

    @property
    def m(self) -> int:
        return self.B.d


def _upto(ctx: LocalTimeContext, t: Optional[float]) -> int:
    return ctx.B.times.size - 1 if t is None else ctx.B.index(t)


def local_time_batch(f: SpaceFunction, times, B, i: int = 0, N=None, freeze: bool = True):
    """Local-time integrals for a batch of paths ``B`` of shape ``(P, n+1, m)``.

    Returns one value per path at the final node.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        B = B[..., None]
    P, n1, m = B.shape
    if N is None:
        N = np.zeros((P, n1, 1))
    tk = np.broadcast_to(np.asarray(times, dtype=float)[:-1], (P, n1 - 1))
    bk, nk = B[:, :-1], N[:, :-1]
    dB = np.diff(B[..., i], axis=1)
    f0 = f(tk, bk, nk)
    if freeze:
        b1 = bk.copy()
        b1[..., i] = B[:, 1:, i]
        f1 = f(tk, b1, nk)
    else:
        f1 = f(np.asarray(times)[1:] * np.ones((P, 1)), B[:, 1:], N[:, 1:])
    return np.sum((f0 - f1) * dB, axis=1)


def local_time_integral(f: SpaceFunction, ctx: LocalTimeContext, i: int = 0,
                        t: Optional[float] = None, freeze: bool = True) -> float:
    """Integral of ``f`` against the local time of ``B^i`` up to ``t``."""
    if not 0 <= i < ctx.m:
        raise IndexError("Brownian coordinate out of range")
    K = _upto(ctx, t)
    times = ctx.B.times[:K + 1]
    B = ctx.B.values[None, :K + 1]
    N = ctx.N_res.values[None, :K + 1]
    return float(local_time_batch(f, times, B, i, N, freeze)[0])


def op_I(F: SpaceFunction, i: int) -> SpaceFunction:
    """``I_i F(b) = int_0^{b_i} F(b|_{b_i=y}) dy`` by adaptive quadrature."""

    def g(t, b, n):
        b = np.asarray(b, dtype=float)
        t = np.broadcast_to(t, b.shape[:-1])
        n = np.broadcast_to(n, b.shape[:-1] + (np.shape(n)[-1],))
        out = np.empty(b.shape[:-1])
        for idx in np.ndindex(out.shape):
            row = b[idx].copy()

            def integrand(y, row=row, idx=idx):
                r = row.copy()
                r[i] = y
                return float(F(t[idx], r[None, :], n[idx][None, :])[0])

            val, _ = integrate.quad(integrand, 0.0, row[i], epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
            out[idx] = val
        return out

    def grad(t, b, n):
        # only the coordinate-i derivative is cheap (FTC); others by difference
        b = np.asarray(b, dtype=float)
        out = np.empty(b.shape)
        h = 1e-5 * (1 + np.abs(b))
        for j in range(b.shape[-1]):
            if j == i:
                out[..., j] = F(t, b, n)
            else:
                e = np.zeros(b.shape[-1])
                e[j] = 1.0
                hh = h[..., j:j + 1]
                out[..., j] = (g(t, b + hh * e, n) - g(t, b - hh * e, n)) / (2 * h[..., j])
        return out

    return SpaceFunction(g, grad, name=f"I{i}({F.name})")


def _jump_part(dF: Callable, i, b, t, n, triplet, R):
    """``int_{|y|<=1} int_0^1 (dF(b + sRy) - dF(b)) (Ry)_i ds nu(dy)``."""
    if triplet is None or not triplet.jumps:
        return np.zeros(np.shape(b)[:-1])
    pts, w = triplet.nu_points(small=True)
    if len(w) == 0:
        return np.zeros(np.shape(b)[:-1])
    s, ws = gauss_legendre_01()
    Ry = pts @ np.asarray(R).T
    base = dF(t, b, n)
    out = np.zeros(np.shape(b)[:-1])
    for ry, wy in zip(Ry, w):
        acc = np.zeros_like(out)
        for sk, wk in zip(s, ws):
            acc += wk * (dF(t, b + sk * ry, n) - base)
        out += wy * ry[i] * acc
    return out


def op_A(F: SpaceFunction, i: int, triplet: Optional[LevyTriplet] = None,
         diffusion_coeff: float = 1.0) -> SpaceFunction:
    """``c d^2F/db_i^2 + int int_0^1 (d_iF(b + sRy) - d_iF(b)) (Ry)_i ds nu(dy)``.

    ``c = diffusion_coeff``; the second derivative is a central difference
    of ``d_iF``.
    """
    R = np.eye(1) if triplet is None or triplet.m == 0 else triplet.R

    def dF(t, b, n):
        return F.partial(t, b, n, i)

    def g(t, b, n):
        b = np.asarray(b, dtype=float)
        h = 1e-4 * (1.0 + np.abs(b[..., i]))
        e = np.zeros(b.shape[-1])
        e[i] = 1.0
        hh = h[..., None]
        d2 = (dF(t, b + hh * e, n) - dF(t, b - hh * e, n)) / (2 * h)
        return diffusion_coeff * d2 + _jump_part(dF, i, b, t, n, triplet, R)

    return SpaceFunction(g, None, name=f"A{i}({F.name})")


def op_AI(G: SpaceFunction, i: int, triplet: Optional[LevyTriplet] = None,
          diffusion_coeff: float = 1.0) -> SpaceFunction:
    """``A_i I_i G`` in closed form: ``d_i I_i G = G`` reduces it to
    ``c d_iG(b) + int int_0^1 (G(b + sRy) - G(b)) (Ry)_i ds nu(dy)``."""
    R = np.eye(1) if triplet is None or triplet.m == 0 else triplet.R

    def g(t, b, n):
        b = np.asarray(b, dtype=float)
        return diffusion_coeff * G.partial(t, b, n, i) + _jump_part(G, i, b, t, n, triplet, R)

    return SpaceFunction(g, None, name=f"A{i}I{i}({G.name})")


def op_L(Fvec: Sequence[SpaceFunction], ctx: LocalTimeContext, t: Optional[float] = None,
         freeze: bool = True) -> float:
    """``sum_i`` local-time integral of ``Fvec[i]`` in coordinate ``i``."""
    if len(Fvec) != ctx.m:
        raise ValueError("need one function per Brownian coordinate")
    return float(sum(local_time_integral(F, ctx, i, t, freeze) for i, F in enumerate(Fvec)))


@dataclass
class LBoundReport:
    lhs: float
    lhs_se: float
    bound: float
    bound_se: float
    remainder: float
    passed: bool


def check_L_bound(f: SpaceFunction, i: int = 0, n_paths: int = 10_000, n_steps: int = 1024,
                  T: float = 1.0, m: int = 1, seed: int = 0, delta: float = 1e-4,
                  batch: int = 1000) -> LBoundReport:
    """Monte Carlo check that ``E|local-time integral| <= |f|_{L,i}``.

    The norm is ``2 E[int_0^T f^2 dt]^{1/2} + E int |f B^i| / t dt``; the
    second integral runs over ``[delta, T]`` and the ``[0, delta]`` piece is
    replaced by ``max|f| * 2 sqrt(2 delta / pi)`` (from
    ``E|B(t)|/t = sqrt(2/(pi t))``), an upper bound when ``f`` is bounded
    there. Passes iff ``lhs <= bound + 3`` standard errors.
    """
    times = np.linspace(0.0, T, n_steps + 1)
    dt = T / n_steps
    lhs, sq, wt, fmax = [], [], [], 0.0
    for start in range(0, n_paths, batch):
        P = min(batch, n_paths - start)
        B = np.zeros((P, n_steps + 1, m))
        for j in range(P):
            rng = path_rng(seed, start + j)
            B[j, 1:] = np.cumsum(rng.standard_normal((n_steps, m)) * np.sqrt(dt), axis=0)
        lhs.append(np.abs(local_time_batch(f, times, B, i)))
        tt = np.broadcast_to(times, (P, n_steps + 1))
        fv = f(tt, B, np.zeros((P, n_steps + 1, 1)))
        # trapezoid in time
        sq.append(np.sum(0.5 * (fv[:, 1:] ** 2 + fv[:, :-1] ** 2), axis=1) * dt)
        sel = times >= delta
        g = np.abs(fv[:, sel] * B[:, sel, i]) / times[sel]
        ts = times[sel]
        wt.append(np.sum(0.5 * (g[:, 1:] + g[:, :-1]) * np.diff(ts), axis=1)
                  + np.abs(fv[:, sel][:, 0] * B[:, sel, i][:, 0]) / ts[0] * (ts[0] - delta))
        early = fv[:, times <= max(delta, times[1])]
        fmax = max(fmax, float(np.max(np.abs(early))))
    lhs, sq, wt = np.concatenate(lhs), np.concatenate(sq), np.concatenate(wt)
    n = lhs.size
    Esq = sq.mean()
    rem = fmax * 2.0 * np.sqrt(2.0 * delta / np.pi)
    bound = 2.0 * np.sqrt(Esq) + wt.mean() + rem
    # delta method for the square root term
    se_sqrt = (sq.std(ddof=1) / np.sqrt(n)) / max(np.sqrt(Esq), 1e-300) if Esq > 0 else 0.0
    bound_se = float(np.hypot(se_sqrt, wt.std(ddof=1) / np.sqrt(n)))
    lhs_se = float(lhs.std(ddof=1) / np.sqrt(n))
    ok = lhs.mean() <= bound + 3.0 * np.hypot(lhs_se, bound_se)
    return LBoundReport(float(lhs.mean()), lhs_se, float(bound), bound_se, float(rem), bool(ok))
