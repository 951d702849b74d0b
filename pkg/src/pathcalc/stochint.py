"""Partition sums: left-point Ito integrals, quadratic covariation and its
continuous part, the Stratonovich integral and the covariation identity for
path functionals.

Integrands are evaluated at the left node of each interval on the path
stopped there. Jumps sit on grid nodes, so for ``s`` in ``(t_k, t_{k+1}]``
the predictable value ``X_{^s-}`` restricted to the grid is the path stopped
at ``t_k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .functional import FDConfig, PathFunctional, derivatives_along
from .pathspace import GridMismatchError, GridPath, stop

__all__ = [
    "NestedPartitions",
    "CovariationResult",
    "build_partitions",
    "node_integrand",
    "ito_integral",
    "ito_integral_nodes",
    "covariation",
    "stratonovich_integral",
    "functional_path",
    "verify_functional_covariation",
]


@dataclass
class NestedPartitions:
    """Refining grids given as node indices into the path grid.

    ``levels[n-1]`` is level ``n``: dyadic nodes ``j T / 2^n`` (snapped down
    to grid nodes) plus every jump with ``|dX| >= 2^-n``. The finest level is
    the full grid.
    """

    path: GridPath
    levels: list

    @property
    def finest(self) -> np.ndarray:
        return np.arange(self.path.times.size)

    def times(self, level: int) -> np.ndarray:
        return self.path.times[self.levels[level - 1]]

    def step_path(self, level: int) -> GridPath:
        """Level-``n`` step approximation ``X(t_{i+1}-)`` on ``[t_i, t_{i+1})``."""
        idx = self.levels[level - 1]
        p = self.path
        left = p.left_values()
        vals = np.empty_like(p.values)
        for a, b in zip(idx[:-1], idx[1:]):
            vals[a:b] = left[b]
        vals[idx[-1]:] = p.values[-1]
        return GridPath(p.times, vals)


def build_partitions(p: GridPath, depth: int) -> NestedPartitions:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    T = p.T
    jsize = np.linalg.norm(p.jumps(), axis=1) if p.jump_idx.size else np.zeros(0)
    levels = []
    for n in range(1, depth + 1):
        dy = np.arange(2 ** n + 1) * (T / 2 ** n)
        idx = np.searchsorted(p.times, dy * (1 + 1e-12) + 1e-300, side="right") - 1
        idx = np.clip(idx, 0, p.times.size - 1)
        big = p.jump_idx[jsize >= 2.0 ** (-n)]
        lev = np.union1d(idx, big)
        if levels:
            lev = np.union1d(lev, levels[-1])
        levels.append(lev.astype(int))
    return NestedPartitions(p, levels)


def node_integrand(integrand, X: GridPath, left: bool = False) -> np.ndarray:
    """Integrand values at every node, shape (n+1, d').

    ``integrand`` may be an array, a GridPath on the same grid, a
    PathFunctional-like callable ``(t, path) -> vector`` (evaluated on the
    path stopped at each node) or a scalar constant.
    """
    n1 = X.times.size
    if isinstance(integrand, GridPath):
        if integrand.times.size != n1 or np.any(integrand.times != X.times):
            raise GridMismatchError("integrand and integrator grids differ")
        v = integrand.left_values() if left else np.array(integrand.values)
        return v
    if callable(integrand):
        rows = [np.atleast_1d(np.asarray(integrand(t, stop(X, t)), dtype=float)) for t in X.times]
        return np.vstack(rows)
    a = np.asarray(integrand, dtype=float)
    if a.ndim == 0:
        return np.full((n1, X.d), float(a))
    if a.ndim == 1 and a.size == n1:
        return a[:, None]
    if a.ndim == 1:
        return np.broadcast_to(a, (n1, a.size))
    return a


def ito_integral_nodes(integrand, X: GridPath) -> np.ndarray:
    """Cumulative left-point sums ``sum_{j<k} H_j . (X_{j+1} - X_j)`` per node."""
    H = node_integrand(integrand, X)
    dX = np.diff(X.values, axis=0)
    if H.shape[1] == 1 and X.d > 1:
        H = np.broadcast_to(H, (H.shape[0], X.d))
    inc = np.einsum("ki,ki->k", H[:-1], dX) if H.shape[1] == X.d else (H[:-1, 0] * dX[:, 0])
    out = np.zeros(X.times.size)
    out[1:] = np.cumsum(inc)
    return out


def ito_integral(integrand, X: GridPath) -> float:
    """Left-point Ito sum on the full grid of ``X``."""
    H = node_integrand(integrand, X)
    dX = np.diff(X.values, axis=0)
    if H.shape[1] == 1 and X.d > 1:
        H = np.broadcast_to(H, (H.shape[0], X.d))
    return float(np.einsum("ki,ki->", H[:-1], dX))


def _jump_vectors(p: GridPath) -> np.ndarray:
    J = np.zeros_like(p.values)
    if p.jump_idx.size:
        J[p.jump_idx] = p.jumps()
    return J


@dataclass
class CovariationResult:
    """Cumulative ``[X, Y]`` per node with its continuous and jump parts.

    Arrays have shape (n+1, dX, dY).
    """

    times: np.ndarray
    total: np.ndarray
    continuous_part: np.ndarray
    jump_part: np.ndarray

    def at_end(self, part: str = "total") -> np.ndarray:
        return getattr(self, part)[-1]


def covariation(X: GridPath, Y: GridPath, parts: Optional[NestedPartitions] = None,
                level: Optional[int] = None) -> CovariationResult:
    """Partition sums of ``dX dY^T``; the jump part comes from the marks.

    With ``parts`` and ``level`` the sums use that partition level (values
    reported at the level's nodes).
    """
    if X.times.size != Y.times.size or np.any(X.times != Y.times):
        raise GridMismatchError("covariation needs a common grid")
    idx = np.arange(X.times.size) if parts is None or level is None else parts.levels[level - 1]
    xv, yv = X.values[idx], Y.values[idx]
    dX, dY = np.diff(xv, axis=0), np.diff(yv, axis=0)
    inc = dX[:, :, None] * dY[:, None, :]
    total = np.zeros((idx.size, X.d, Y.d))
    total[1:] = np.cumsum(inc, axis=0)
    JX, JY = _jump_vectors(X), _jump_vectors(Y)
    jinc = JX[:, :, None] * JY[:, None, :]
    cj = np.cumsum(jinc, axis=0)[idx]
    return CovariationResult(X.times[idx], total, total - cj, cj)


def functional_path(F: PathFunctional, X: GridPath) -> GridPath:
    """``t -> F(t, X_{^t})`` as a path, with jumps where ``F`` jumps at
    marked nodes of ``X``."""
    post = F.along(X, left=False)
    vals = post[:, None]
    if X.jump_idx.size:
        pre_all = F.along(X, left=True)
        pre = pre_all[X.jump_idx][:, None]
        keep = pre[:, 0] != vals[X.jump_idx, 0]
        return GridPath(X.times, vals, X.jump_idx[keep], pre[keep])
    return GridPath(X.times, vals)


def stratonovich_integral(integrand, Y: GridPath, parts: Optional[NestedPartitions] = None,
                          finite_variation: bool = False) -> float:
    """Ito integral plus one half of the continuous covariation of the
    integrand path with ``Y``.

    ``integrand`` is a GridPath on Y's grid (its jump marks define the
    continuous part) or a PathFunctional, turned into its value path. With
    ``finite_variation=True`` the integrand is known to have finite
    variation, so its continuous covariation with ``Y`` is zero and the
    partition estimate of it is skipped.
    """
    if isinstance(integrand, PathFunctional):
        Z = functional_path(integrand, Y)
    elif isinstance(integrand, GridPath):
        Z = integrand
    else:
        Z = GridPath(Y.times, node_integrand(integrand, Y))
    ito = ito_integral(Z, Y)
    if finite_variation:
        return ito
    c = covariation(Z, Y).at_end("continuous_part")
    corr = float(np.trace(c)) if c.shape[0] == c.shape[1] else float(np.sum(c))
    return ito + 0.5 * corr


def verify_functional_covariation(F: PathFunctional, X: GridPath, j: int = 0,
                                  parts: Optional[NestedPartitions] = None,
                                  cfg: FDConfig = FDConfig()) -> dict:
    """Partition covariation of ``F(., X)`` with ``X^j`` against
    ``sum_i int d_iF d[X^i, X^j]^c + sum dF dX^j``, both at ``T``."""
    Z = functional_path(F, X)
    lhs = float(covariation(Z, X).at_end()[0, j])
    der = derivatives_along(F, X, cfg, left=False, hessian=False)
    grad = der["grad"]
    dX = np.diff(X.values, axis=0)
    J = _jump_vectors(X)
    dc = dX[:, :, None] * dX[:, None, :] - (J[1:, :, None] * J[1:, None, :])
    cont = float(np.einsum("ki,ki->", grad[:-1], dc[:, :, j]))
    jump = float(np.sum(_jump_vectors(Z)[:, 0] * J[:, j]))
    rhs = cont + jump
    return {"lhs": lhs, "continuous": cont, "jumps": jump, "rhs": rhs,
            "residual": abs(lhs - rhs), "unstable": der["unstable"]}
