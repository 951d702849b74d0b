import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathcalc.functional import make_functional
from pathcalc.levy import brownian_paths
from pathcalc.pathspace import GridMismatchError, GridPath
from pathcalc.stochint import (build_partitions, covariation, functional_path, ito_integral,
                               ito_integral_nodes, stratonovich_integral,
                               verify_functional_covariation)
from strategies import grid_paths


@given(grid_paths(d=2), st.floats(-3, 3))
def test_ito_constant_integrand(p, c):
    assert ito_integral(c, p) == pytest.approx(c * float(np.sum(p.values[-1] - p.values[0])), abs=1e-12)
    assert ito_integral_nodes(c, p)[-1] == pytest.approx(ito_integral(c, p), abs=1e-12)


@given(grid_paths(), grid_paths())
def test_covariation_symmetric_and_splits(a, b):
    b = GridPath(a.times, np.resize(b.values, a.values.shape), a.jump_idx, np.resize(b.pre, a.pre.shape))
    ab, ba = covariation(a, b), covariation(b, a)
    assert np.allclose(ab.total, np.swapaxes(ba.total, 1, 2))
    assert np.allclose(ab.total, ab.continuous_part + ab.jump_part)


@given(grid_paths())
def test_jump_part_is_sum_of_squared_jumps(p):
    c = covariation(p, p)
    J = p.jumps()
    assert c.at_end("jump_part")[0, 0] == pytest.approx(float(np.sum(J ** 2)))


def test_grid_mismatch():
    a = GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 0.0])
    b = GridPath([0.0, 0.4, 1.0], [0.0, 1.0, 0.0])
    with pytest.raises(GridMismatchError):
        covariation(a, b)


@given(grid_paths(min_n=10), st.integers(1, 5))
def test_partitions_nested(p, depth):
    parts = build_partitions(p, depth)
    for lo, hi in zip(parts.levels, parts.levels[1:]):
        assert set(lo) <= set(hi)
    for k, y in zip(p.jump_idx, p.jumps()):
        if np.linalg.norm(y) >= 2.0 ** -1:
            assert k in parts.levels[0]


def test_stratonovich_exact_correction():
    t = np.linspace(0, 1, 4097)
    for b in brownian_paths(4, 4096, seed=1):
        B = GridPath(t, b)
        assert stratonovich_integral(B, B) == pytest.approx(b[-1, 0] ** 2 / 2, abs=1e-12)


def test_functional_path_jumps():
    p = GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 3.0], [2], [[1.0]])
    Z = functional_path(make_functional("square"), p)
    assert np.allclose(Z.values[:, 0], [0.0, 1.0, 9.0])
    assert list(Z.jump_idx) == [2] and Z.pre[0, 0] == 1.0


def test_running_integral_covariation_is_order_dt():
    # a finite-variation functional: covariation with B vanishes at rate dt
    n = 4096
    t = np.linspace(0, 1, n + 1)
    b = brownian_paths(1, n, seed=5)[0]
    r = verify_functional_covariation(make_functional("running-integral"), GridPath(t, b))
    assert r["residual"] <= 10.0 / n
