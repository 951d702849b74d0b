import numpy as np
import pytest
from hypothesis import given

from pathcalc.apps import (ASIAN_IDS, asian_derivatives, asian_fd_check, asian_functional, asian_J,
                           asian_pricing_residual, gamma_invariant_from_id, gamma_invariant_functional,
                           verify_gamma_invariant)
from pathcalc.flow import make_direction
from pathcalc.levy import brownian_paths
from pathcalc.pathspace import GridPath
from pathcalc.verify import HypothesisViolation, HypothesisWarning, make_model
from strategies import grid_paths


@given(grid_paths(d=2))
def test_J_endpoints(p):
    J = asian_J(p)
    T = p.T
    assert np.allclose(J[0], T * p.values[0])
    integral = np.sum(np.diff(p.times)[:, None] * p.values[:-1], axis=0)
    assert np.allclose(J[-1], integral)


@pytest.mark.parametrize("fid", ["linear-J", "linear-x", "square-J", "geom", "arith-call:0.1"])
def test_asian_analytic_matches_fd(fid):
    A = asian_functional(fid)
    t = np.linspace(0, 1, 257)
    p = GridPath(t, 0.3 * brownian_paths(1, 256, seed=4)[0])
    assert asian_fd_check(A, p, t[[0, 64, 128, 200]]) < 1e-5


def test_linear_asian_derivatives():
    t = np.linspace(0, 1, 5)
    p = GridPath(t, [0.0, 1.0, 2.0, 1.0, 0.5])
    DF, g = asian_derivatives(asian_functional("linear-J"), 0.5, p)
    # J is unchanged by a flat extension, and dJ/dx is T - t
    assert DF == pytest.approx(0.0, abs=1e-12) and g[0] == pytest.approx(0.5)
    DF, g = asian_derivatives(asian_functional("linear-x"), 0.5, p)
    assert DF == 0.0 and g[0] == 1.0


def test_unknown_asian_id():
    with pytest.raises(KeyError):
        asian_functional("nope")
    assert "geom" in ASIAN_IDS


def test_linear_x_bv_vanishes():
    rep = asian_pricing_residual(asian_functional("linear-x"), make_model("bm"), 40, 256, seed=2)
    assert rep.bv_rms < 1e-10
    assert rep.J_constant(4.0)


def test_geom_bv_shrinks_with_n():
    A = asian_functional("geom")
    m = make_model("bm")
    a = asian_pricing_residual(A, m, 16, 256, seed=1).bv_rms
    b = asian_pricing_residual(A, m, 16, 4096, seed=1).bv_rms
    assert b < a / 2


def test_asian_drift_warning():
    with pytest.warns(HypothesisWarning, match="driftless"):
        asian_pricing_residual(asian_functional("linear-x"), make_model("rank-deficient"), 4, 64, 0)


# gamma-invariant functionals

def _smooth_path(n=512):
    t = np.linspace(0, 1, n + 1)
    return GridPath(t, np.sin(3 * t) + 0.5 * t ** 2)


def test_zero_direction_is_terminal_value():
    F = gamma_invariant_from_id("quad,zero")
    p = _smooth_path()
    y = F.forecast(0.5, p)
    assert np.allclose(y, p(0.5))


def test_const_direction_closed_form():
    F = gamma_invariant_from_id("linear,const:0.7")
    p = _smooth_path()
    for t in (0.0, 0.25, 0.75):
        assert np.allclose(F.forecast(t, p), p(t) + 0.7 * (1 - t), atol=1e-10)


def test_chain_rule_smooth_path_first_order():
    # left sums drop the cross term of dX and gamma dt, which is O(dt)
    F = gamma_invariant_from_id("quad,const:0.3")
    a = verify_gamma_invariant(F, _smooth_path(256)).residual
    b = verify_gamma_invariant(F, _smooth_path(4096)).residual
    assert b <= 1e-4 and b < a / 8


def test_chain_rule_brownian_zero_direction():
    t = np.linspace(0, 1, 2049)
    p = GridPath(t, brownian_paths(1, 2048, seed=6)[0])
    assert verify_gamma_invariant(gamma_invariant_from_id("quad,zero"), p).residual < 1e-10


def test_jump_path_rejected():
    p = GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 1.0], [1], [[0.0]])
    with pytest.raises(HypothesisViolation):
        verify_gamma_invariant(gamma_invariant_from_id("quad,zero"), p)


def test_path_dependent_direction_warns():
    F = gamma_invariant_functional(lambda y: float(y @ y), make_direction("self"),
                                   grad_f=lambda y: 2 * y, hess_f=lambda y: 2 * np.eye(y.size))
    with pytest.warns(HypothesisWarning, match="depends on the path"):
        verify_gamma_invariant(F, _smooth_path(64))
