"""Finite-activity Levy triplets, their Gaussian factorization and path
simulation.

A Levy path is ``mu t + S B(t) + (large jumps) + (compensated small jumps)``
with ``S`` the ``d x m`` square root of the covariance. Jump times are
inserted into the grid as marked nodes, so ``X(t-)`` and ``dX(t)`` are exact.
Each path draws from its own counter-based stream keyed by
``(seed, path_index)``, which makes results independent of how paths are
distributed over workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .pathspace import GridPath

__all__ = [
    "InvalidMeasureError",
    "FactorizationError",
    "HBoundError",
    "JumpComponent",
    "LevyTriplet",
    "SimGrid",
    "JumpLedger",
    "LevyPath",
    "LevyTypeCoefficients",
    "factorize",
    "path_rng",
    "simulate",
    "simulate_levy_type",
    "gaussian_approx_family",
    "triplet_from_config",
    "brownian_paths",
    "coarsen",
]

# stratified sample size for non-atomic jump-measure integrals
NU_MC_DRAWS = 10_000


class InvalidMeasureError(ValueError):
    """Jump measure that cannot be simulated or compensated as requested."""


class FactorizationError(ValueError):
    """Covariance is not symmetric positive semidefinite."""


class HBoundError(RuntimeError):
    """Small-jump coefficient exceeded its declared bound."""


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based generator for one path: Philox keyed by (seed, index)."""
    ss = np.random.SeedSequence(int(seed) & (2 ** 64 - 1), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss))


def factorize(sigma, tol: float = 1e-10):
    """Square root, range projection and left inverse of a PSD covariance.

    Returns ``(sigma_half, Q, R, m)`` with ``sigma_half`` of shape ``(d, m)``,
    ``m`` the numerical rank at threshold ``1e-12 |sigma|``. Full-rank input
    gets the symmetric square root.
    """
    S = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = S.shape[0]
    if S.shape != (d, d):
        raise FactorizationError("sigma must be square")
    norm = float(np.linalg.norm(S, 2)) if S.size else 0.0
    if np.max(np.abs(S - S.T), initial=0.0) > tol * max(1.0, norm):
        raise FactorizationError("sigma is not symmetric")
    if norm == 0.0:
        return np.zeros((d, 0)), np.zeros((d, d)), np.zeros((0, d)), 0
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    if lam[0] < -tol * max(1.0, norm):
        raise FactorizationError("sigma is indefinite")
    keep = lam > 1e-12 * norm
    m = int(np.count_nonzero(keep))
    if m == d:
        half = (V * np.sqrt(lam)) @ V.T
        half = 0.5 * (half + half.T)
        Q = np.eye(d)
        R = np.linalg.solve(half.T @ half, half.T)
        return half, Q, R, m
    Vr = V[:, keep]
    # sign convention: largest entry of each column positive
    idx = np.argmax(np.abs(Vr), axis=0)
    Vr = Vr * np.sign(Vr[idx, np.arange(m)])
    half = Vr * np.sqrt(lam[keep])
    R = np.linalg.solve(half.T @ half, half.T)
    Q = half @ R
    Q = 0.5 * (Q + Q.T)
    return half, Q, R, m


@dataclass
class JumpComponent:
    """One finite-activity jump component: ``rate`` times a jump law.

    ``dist`` is ``"atom"`` (params ``atoms``, optional ``probs``),
    ``"uniform-ball"`` (``radius``, optional ``center``) or
    ``"normal-truncated"`` (``mean``, ``scale``, ``radius``).
    """

    rate: float
    dist: str
    params: dict
    d: int = 1

    def __post_init__(self):
        if not self.rate > 0:
            raise InvalidMeasureError("jump rates must be positive")
        p = self.params
        if self.dist == "atom":
            atoms = np.asarray(p["atoms"], dtype=float).reshape(-1, self.d)
            probs = np.asarray(p.get("probs", np.full(len(atoms), 1.0 / len(atoms))), dtype=float)
            if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
                raise InvalidMeasureError("atom probabilities must sum to 1")
            if np.any(np.all(atoms == 0, axis=1)):
                raise InvalidMeasureError("atoms must be nonzero")
            self._atoms, self._probs = atoms, probs
        elif self.dist == "uniform-ball":
            r = float(p["radius"])
            c = np.zeros(self.d) if p.get("center") is None else np.asarray(p["center"], float)
            if not np.isfinite(r) or r <= 0:
                raise InvalidMeasureError("uniform-ball needs a finite positive radius")
            self._r, self._c = r, c
        elif self.dist == "normal-truncated":
            r = float(p.get("radius", np.inf))
            if not np.isfinite(r):
                raise InvalidMeasureError(
                    "normal-truncated jumps need a finite radius for compensation")
            self._r = r
            self._mean = np.broadcast_to(np.asarray(p.get("mean", 0.0), float), (self.d,)).copy()
            self._scale = float(p.get("scale", 1.0))
        else:
            raise InvalidMeasureError(f"unknown jump law {self.dist!r}")
        self._pts = None

    @property
    def is_atomic(self) -> bool:
        return self.dist == "atom"

    @property
    def support_radius(self) -> float:
        if self.dist == "atom":
            return float(np.max(np.linalg.norm(self._atoms, axis=1)))
        if self.dist == "uniform-ball":
            return self._r + float(np.linalg.norm(self._c))
        return self._r

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = self.d
        if n == 0:
            return np.zeros((0, d))
        if self.dist == "atom":
            k = rng.choice(len(self._atoms), size=n, p=self._probs)
            return self._atoms[k]
        if self.dist == "uniform-ball":
            z = rng.standard_normal((n, d))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            rad = self._r * rng.random(n) ** (1.0 / d)
            return self._c + z * rad[:, None]
        out = np.empty((n, d))
        filled = 0
        while filled < n:
            z = self._mean + self._scale * rng.standard_normal((2 * (n - filled) + 8, d))
            z = z[np.linalg.norm(z, axis=1) <= self._r]
            take = min(len(z), n - filled)
            out[filled:filled + take] = z[:take]
            filled += take
        return out

    def points(self):
        """Discretization ``(points, probabilities)`` of the jump law: exact
        for atoms, otherwise a fixed stratified sample of NU_MC_DRAWS points."""
        if self.dist == "atom":
            return self._atoms, self._probs
        if self._pts is None:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0x5EED)))
            pts = self.sample(rng, NU_MC_DRAWS)
            self._pts = (pts, np.full(len(pts), 1.0 / len(pts)))
        return self._pts


@dataclass
class LevyTriplet:
    """Drift ``mu``, covariance ``sigma`` and finite-activity jump measure."""

    mu: np.ndarray
    sigma: np.ndarray
    jumps: List[JumpComponent] = field(default_factory=list)
    name: str = "levy"

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        d = self.mu.size
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(d, d)
        self.sigma_half, self.Q, self.R, self.m = factorize(self.sigma)
        for c in self.jumps:
            if c.d != d:
                raise InvalidMeasureError("jump dimension differs from drift dimension")

    @property
    def d(self) -> int:
        return self.mu.size

    @property
    def total_rate(self) -> float:
        return float(sum(c.rate for c in self.jumps))

    def nu_points(self, small: Optional[bool] = None):
        """Weighted points representing ``nu`` (weights are intensities).

        ``small=True`` keeps ``|y| <= 1``, ``False`` keeps ``|y| > 1``.
        """
        P, W = [np.zeros((0, self.d))], [np.zeros(0)]
        for c in self.jumps:
            pts, pr = c.points()
            w = c.rate * pr
            if small is not None:
                sel = np.linalg.norm(pts, axis=1) <= 1.0
                sel = sel if small else ~sel
                pts, w = pts[sel], w[sel]
            P.append(pts)
            W.append(w)
        return np.vstack(P), np.concatenate(W)

    def nu_integrate(self, fn: Callable, small: Optional[bool] = None) -> float:
        """``int fn(y) nu(dy)`` over the selected part of the measure."""
        pts, w = self.nu_points(small)
        if len(w) == 0:
            return 0.0
        vals = np.asarray(fn(pts), dtype=float)
        return float(np.tensordot(w, vals, axes=(0, 0)))

    def compensator(self) -> np.ndarray:
        """``int_{|y|<=1} y nu(dy)``, the drift removed to compensate small jumps."""
        pts, w = self.nu_points(small=True)
        return w @ pts if len(w) else np.zeros(self.d)

    def second_moment(self) -> np.ndarray:
        pts, w = self.nu_points()
        return (pts * w[:, None]).T @ pts if len(w) else np.zeros((self.d, self.d))


@dataclass(frozen=True)
class SimGrid:
    n_steps: int
    T: float = 1.0
    scheme: str = "euler"
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if self.scheme != "euler":
            raise ValueError("only the euler scheme is available")


@dataclass
class JumpLedger:
    """Recorded jumps: grid index, time, size and component index."""

    idx: np.ndarray
    times: np.ndarray
    sizes: np.ndarray
    comp: np.ndarray

    def __len__(self):
        return int(self.idx.size)


@dataclass
class LevyPath:
    """Simulated path with its Brownian coordinates and jump ledger."""

    X: GridPath
    B: GridPath
    ledger: JumpLedger
    sigma_half: np.ndarray
    terms: dict = field(default_factory=dict)

    @property
    def N_res(self) -> GridPath:
        """``N(t) = X(t) - S B(t)`` on the same grid and with the same jumps."""
        v = self.X.values - self.B.values @ self.sigma_half.T
        pre = self.X.pre - self.B.values[self.X.jump_idx] @ self.sigma_half.T
        return GridPath(self.X.times, v, self.X.jump_idx, pre)


def _jump_schedule(triplet: LevyTriplet, T: float, rng: np.random.Generator):
    times, sizes, comp = [], [], []
    for ci, c in enumerate(triplet.jumps):
        n = rng.poisson(c.rate * T)
        times.append(rng.uniform(0.0, T, n))
        sizes.append(c.sample(rng, n))
        comp.append(np.full(n, ci))
    if not times:
        return np.zeros(0), np.zeros((0, triplet.d)), np.zeros(0, dtype=int)
    t = np.concatenate(times)
    y = np.vstack(sizes) if sizes else np.zeros((0, triplet.d))
    cc = np.concatenate(comp).astype(int)
    order = np.argsort(t, kind="stable")
    return t[order], y[order], cc[order]


def _merge_grid(n_steps, T, jt):
    base = np.linspace(0.0, T, n_steps + 1)
    jt = jt[(jt > 0) & (jt <= T)]
    times = np.union1d(base, jt)
    idx = np.searchsorted(times, jt)
    return times, idx


def simulate(triplet: LevyTriplet, grid: SimGrid, rng=None, path_index: int = 0) -> LevyPath:
    """Simulate one Levy path on ``grid`` with jump times as grid nodes.

    ``rng`` defaults to the per-path stream ``path_rng(grid.seed, path_index)``.
    """
    if rng is None:
        rng = path_rng(grid.seed, path_index)
    T, d, m = grid.T, triplet.d, triplet.m
    jt, jy, jc = _jump_schedule(triplet, T, rng)
    times, jidx = _merge_grid(grid.n_steps, T, jt)
    dt = np.diff(times)
    dB = rng.standard_normal((dt.size, m)) * np.sqrt(dt)[:, None]
    B = np.vstack([np.zeros((1, m)), np.cumsum(dB, axis=0)])
    drift = triplet.mu - triplet.compensator()
    cont = times[:, None] * drift + B @ triplet.sigma_half.T
    J = np.zeros((times.size, d))
    if jidx.size:
        # several jumps could share a node only with probability zero
        np.add.at(J, jidx, jy)
    cumJ = np.cumsum(J, axis=0)
    X = cont + cumJ
    uniq = np.unique(jidx)
    pre = X[uniq] - np.array([J[k] for k in uniq]).reshape(-1, d)
    keep = np.any(X[uniq] != pre, axis=1)
    Xp = GridPath(times, X, uniq[keep], pre[keep])
    Bp = GridPath(times, B)
    ledger = JumpLedger(jidx, times[jidx] if jidx.size else np.zeros(0), jy, jc)
    return LevyPath(Xp, Bp, ledger, triplet.sigma_half)


@dataclass
class LevyTypeCoefficients:
    """Coefficients of ``dX = G dt + L dB + K dN(large) + H dN~(small)``.

    Markov form: ``G(t, x) -> (d,)``, ``L(t, x) -> (d, m)``,
    ``K(t, y, x) -> (d,)`` for ``|y| > 1``, ``H(t, y, x) -> (d,)`` for
    ``|y| <= 1``, with ``x = X(t-)``. ``H_bound`` is the declared
    ``sup |H|``. ``x0`` is the initial state.
    """

    G: Callable
    L: Callable
    K: Callable
    H: Callable
    H_bound: float = np.inf
    x0: Optional[np.ndarray] = None


def simulate_levy_type(coeffs: LevyTypeCoefficients, noise: LevyTriplet, grid: SimGrid,
                       rng=None, path_index: int = 0) -> LevyPath:
    """Euler scheme for a Levy-type integral driven by the noise triplet.

    The noise supplies ``m`` Brownian coordinates and the jump measure; the
    noise drift is ignored (drift enters through ``G``). Per-term totals are
    kept in ``LevyPath.terms``.
    """
    if rng is None:
        rng = path_rng(grid.seed, path_index)
    T, d = grid.T, noise.d
    m = max(noise.m, 1) if noise.m else 0
    jt, jy, jc = _jump_schedule(noise, T, rng)
    times, jidx = _merge_grid(grid.n_steps, T, jt)
    dt = np.diff(times)
    dB = rng.standard_normal((dt.size, noise.m)) * np.sqrt(dt)[:, None]
    B = np.vstack([np.zeros((1, noise.m)), np.cumsum(dB, axis=0)])
    small_pts, small_w = noise.nu_points(small=True)
    x = np.zeros(d) if coeffs.x0 is None else np.asarray(coeffs.x0, float).copy()
    X = np.empty((times.size, d))
    X[0] = x
    jump_at = {}
    for k, yk in zip(jidx, jy):
        jump_at.setdefault(int(k), []).append(yk)
    acc = {"drift": np.zeros(d), "diffusion": np.zeros(d), "large": np.zeros(d),
           "small": np.zeros(d), "small_compensator": np.zeros(d)}
    pre_idx, pre_val = [], []

    def Hc(t, y, xx):
        h = np.asarray(coeffs.H(t, y, xx), dtype=float)
        if np.linalg.norm(h) > coeffs.H_bound * (1 + 1e-12):
            raise HBoundError(f"|H(t={t:.6g}, y)| = {np.linalg.norm(h):.6g} exceeds the declared bound")
        return h

    for k in range(dt.size):
        t = times[k]
        g = np.asarray(coeffs.G(t, x), dtype=float) * dt[k]
        l = (np.asarray(coeffs.L(t, x), dtype=float).reshape(d, -1) @ dB[k]) if noise.m else np.zeros(d)
        comp = np.zeros(d)
        for y, w in zip(small_pts, small_w):
            comp += w * Hc(t, y, x)
        comp *= dt[k]
        x = x + g + l - comp
        acc["drift"] += g
        acc["diffusion"] += l
        acc["small_compensator"] -= comp
        js = jump_at.get(k + 1)
        if js:
            before = x.copy()
            for y in js:
                if np.linalg.norm(y) > 1.0:
                    dx = np.asarray(coeffs.K(times[k + 1], y, before), dtype=float)
                    acc["large"] += dx
                else:
                    dx = Hc(times[k + 1], y, before)
                    acc["small"] += dx
                x = x + dx
            if np.any(x != before):
                pre_idx.append(k + 1)
                pre_val.append(before)
        X[k + 1] = x
    Xp = GridPath(times, X, pre_idx, np.array(pre_val).reshape(len(pre_idx), d))
    ledger = JumpLedger(jidx, times[jidx] if jidx.size else np.zeros(0), jy, jc)
    return LevyPath(Xp, GridPath(times, B), ledger, noise.sigma_half, acc)


def gaussian_approx_family(eps: float, d: int = 1) -> LevyTriplet:
    """Pure-jump surrogate of a standard Brownian motion.

    Atoms at ``+-eps e_i`` each with rate ``1/(2 eps^2)``; then
    ``int y y^T nu(dy) = I`` and the compensator vanishes by symmetry.
    """
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    rate = 1.0 / (2.0 * eps ** 2)
    comps = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        comps.append(JumpComponent(2 * rate, "atom", {"atoms": [e, -e]}, d=d))
    return LevyTriplet(np.zeros(d), np.zeros((d, d)), comps, name=f"eps-family:{eps:g}")


def triplet_from_config(cfg: dict) -> LevyTriplet:
    """Build a triplet from ``{mu, sigma, jumps: [...], eps_family}``."""
    if cfg.get("eps_family"):
        ef = cfg["eps_family"]
        if isinstance(ef, dict):
            return gaussian_approx_family(float(ef["eps"]), int(ef.get("d", 1)))
        return gaussian_approx_family(float(ef), len(np.atleast_1d(cfg.get("mu", [0.0]))))
    mu = np.atleast_1d(np.asarray(cfg.get("mu", [0.0]), dtype=float))
    d = mu.size
    sigma = np.asarray(cfg.get("sigma", np.eye(d)), dtype=float).reshape(d, d)
    jumps = [JumpComponent(float(j["rate"]), j["dist"], dict(j.get("params", {})), d=d)
             for j in cfg.get("jumps", [])]
    return LevyTriplet(mu, sigma, jumps, name=cfg.get("name", "levy"))


def brownian_paths(n_paths: int, n_steps: int, T: float = 1.0, d: int = 1, seed: int = 0,
                   start: int = 0) -> np.ndarray:
    """Batch of standard Brownian paths on a uniform grid, shape
    ``(n_paths, n_steps + 1, d)``; path ``i`` uses stream ``(seed, start + i)``."""
    dt = T / n_steps
    out = np.zeros((n_paths, n_steps + 1, d))
    for i in range(n_paths):
        rng = path_rng(seed, start + i)
        out[i, 1:] = np.cumsum(rng.standard_normal((n_steps, d)) * np.sqrt(dt), axis=0)
    return out


def coarsen(lp: LevyPath, n_steps: int) -> LevyPath:
    """Restrict a simulated path to the uniform ``n_steps`` grid plus its jump
    nodes; values at kept nodes (and pre-jump values) are unchanged."""
    X = lp.X
    T = X.T
    base = np.linspace(0.0, T, n_steps + 1)
    kb = np.searchsorted(X.times, base)
    kb = np.clip(kb, 0, X.times.size - 1)
    if np.any(np.abs(X.times[kb] - base) > 1e-12 * max(1.0, T)):
        raise ValueError("coarse grid is not a subgrid of the simulation grid")
    keep = np.union1d(kb, lp.ledger.idx).astype(int)
    pos = {int(k): i for i, k in enumerate(keep)}
    ji = np.array([pos[int(k)] for k in X.jump_idx], dtype=int)
    Xc = GridPath(X.times[keep], X.values[keep], ji, X.pre)
    Bc = GridPath(X.times[keep], lp.B.values[keep])
    lidx = np.array([pos[int(k)] for k in lp.ledger.idx], dtype=int)
    led = JumpLedger(lidx, lp.ledger.times, lp.ledger.sizes, lp.ledger.comp)
    return LevyPath(Xc, Bc, led, lp.sigma_half, dict(lp.terms))
