import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathcalc.levy import (FactorizationError, HBoundError, InvalidMeasureError, JumpComponent,
                           LevyTriplet, LevyTypeCoefficients, SimGrid, brownian_paths, coarsen,
                           factorize, gaussian_approx_family, path_rng, simulate,
                           simulate_levy_type, triplet_from_config)


@given(st.integers(1, 4), st.integers(0, 4), st.integers(0, 2 ** 31))
def test_factorize_properties(d, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, d)
    A = rng.standard_normal((d, r))
    sigma = A @ A.T
    half, Q, R, m = factorize(sigma)
    assert m == np.linalg.matrix_rank(sigma, tol=1e-10 * max(1.0, np.linalg.norm(sigma)))
    assert np.allclose(half @ half.T, sigma, atol=1e-9)
    assert np.allclose(Q @ Q, Q, atol=1e-9) and np.allclose(Q, Q.T)
    if m:
        assert np.allclose(R @ half, np.eye(m), atol=1e-8)
        assert np.allclose(Q @ half, half, atol=1e-8)


def test_factorize_full_rank_symmetric_root():
    half, Q, R, m = factorize([[2.0, 0.5], [0.5, 1.0]])
    assert m == 2 and np.allclose(half, half.T) and np.allclose(Q, np.eye(2))


def test_factorize_errors():
    with pytest.raises(FactorizationError):
        factorize([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(FactorizationError):
        factorize([[1.0, 0.0], [0.0, -1.0]])


def test_jump_component_errors():
    with pytest.raises(InvalidMeasureError):
        JumpComponent(0.0, "atom", {"atoms": [[1.0]]})
    with pytest.raises(InvalidMeasureError):
        JumpComponent(1.0, "normal-truncated", {"scale": 1.0})
    with pytest.raises(InvalidMeasureError):
        JumpComponent(1.0, "atom", {"atoms": [[0.0]]})
    with pytest.raises(InvalidMeasureError):
        JumpComponent(1.0, "cauchy", {})


def test_path_rng_streams():
    a = path_rng(5, 3).standard_normal(4)
    assert np.array_equal(a, path_rng(5, 3).standard_normal(4))
    assert not np.array_equal(a, path_rng(5, 4).standard_normal(4))


def _jd(d=1):
    return LevyTriplet(np.zeros(d), np.eye(d),
                       [JumpComponent(3.0, "atom", {"atoms": [[1.0] * d, [-0.5] * d]}, d=d)])


@given(st.integers(0, 10 ** 6))
def test_simulated_jumps_match_ledger(seed):
    lp = simulate(_jd(), SimGrid(64, 1.0, seed=seed))
    X, led = lp.X, lp.ledger
    assert np.array_equal(np.sort(X.jump_idx), np.unique(led.idx))
    assert np.allclose(X.jumps().sum(axis=0), np.asarray(led.sizes).reshape(-1, 1).sum(axis=0))
    # jump nodes sit exactly at the jump times
    assert np.allclose(X.times[led.idx], led.times)


def test_compensator_and_drift():
    tr = LevyTriplet([0.0], [[0.0]], [JumpComponent(2.0, "atom", {"atoms": [[0.5]]})])
    assert tr.compensator()[0] == pytest.approx(1.0)
    lp = simulate(tr, SimGrid(16, 1.0, seed=1))
    X = lp.X
    # between jumps the path drifts at -1
    inc = np.diff(X.values[:, 0])
    mask = np.ones(inc.size, dtype=bool)
    mask[X.jump_idx - 1] = False
    assert np.allclose(inc[mask], -np.diff(X.times)[mask])


def test_coarsen_keeps_values():
    lp = simulate(_jd(), SimGrid(256, 1.0, seed=3))
    c = coarsen(lp, 16)
    assert c.X.jump_idx.size == lp.X.jump_idx.size
    for t, v in zip(c.X.times, c.X.values):
        assert np.array_equal(v, lp.X.values[lp.X.index(t)])
    assert np.allclose(c.X.jumps(), lp.X.jumps())


def test_eps_family_moments():
    for eps in (0.5, 0.1):
        tr = gaussian_approx_family(eps)
        assert tr.second_moment()[0, 0] == pytest.approx(1.0)
        pts, w = tr.nu_points()
        assert float(w @ pts[:, 0] ** 4) == pytest.approx(eps ** 2)


def test_brownian_paths_variance():
    B = brownian_paths(4000, 8, seed=2)
    assert abs(B[:, -1, 0].var() - 1.0) < 0.1


def test_levy_type_h_bound():
    noise = _jd()
    co = LevyTypeCoefficients(G=lambda t, x: 0.0 * x, L=lambda t, x: np.eye(1),
                              K=lambda t, y, x: 0.0 * y, H=lambda t, y, x: 10.0 * y, H_bound=1.0)
    with pytest.raises(HBoundError):
        simulate_levy_type(co, noise, SimGrid(64, 1.0, seed=4))


def test_triplet_from_config():
    tr = triplet_from_config({"mu": [0.1, 0.0], "sigma": [[1, 0], [0, 0]],
                              "jumps": [{"rate": 1.0, "dist": "uniform-ball", "params": {"radius": 0.5}}]})
    assert tr.d == 2 and tr.m == 1
    pts, w = tr.nu_points(small=True)
    assert np.all(np.linalg.norm(pts, axis=1) <= 0.5) and w.sum() == pytest.approx(1.0)
