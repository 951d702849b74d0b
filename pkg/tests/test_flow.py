import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathcalc.flow import (DIRECTION_IDS, check_lipschitz, gamma_derivative, gamma_derivative_along,
                           make_direction, solve_flow)
from pathcalc.functional import OutOfDomainError, make_functional
from pathcalc.pathspace import GridPath, remove_jump, stop
from strategies import grid_paths, node_time


def _const_path(x0, n=256, T=1.0):
    t = np.linspace(0.0, T, n + 1)
    return GridPath(t, np.full(t.size, x0))


@given(st.floats(-2, 2), st.floats(-2, 2), st.sampled_from([0, 64, 128]))
def test_const_direction_closed_form(x0, c, k):
    w = _const_path(x0)
    s = float(w.times[k])
    sol = solve_flow(make_direction(f"const:{c}"), s, w, tol=1e-10, use_cache=False)
    Y = sol.path
    assert np.allclose(Y.values[:, 0], np.where(Y.times >= s, x0 + c * (Y.times - s), x0), atol=1e-12)


def test_self_direction_exponential():
    sol = solve_flow(make_direction("self"), 0.0, _const_path(1.0), tol=1e-10, use_cache=False)
    assert np.max(np.abs(sol.path.values[:, 0] - np.exp(sol.path.times))) <= 1e-8
    assert sol.max_ratio <= 0.5


def test_unknown_direction():
    with pytest.raises(KeyError):
        make_direction("wobble")


@pytest.mark.parametrize("gid", ["zero", "const:1", "self", "running-mean", "ignore-jump:self"])
@given(a=grid_paths(min_n=5), b=grid_paths(min_n=5), frac=st.floats(0, 1))
def test_lipschitz_on_common_grid(gid, a, b, frac):
    b = GridPath(a.times, b.values[: a.times.size] if b.times.size >= a.times.size
                 else np.resize(b.values, a.values.shape))
    t = node_time(a, frac)
    assert check_lipschitz(make_direction(gid), [(t, a, b)]) <= 0


@given(grid_paths(min_n=5), st.floats(0, 1))
def test_ignore_jump_wrapper_exact(p, frac):
    g = make_direction("ignore-jump:running-mean")
    t = node_time(p, frac)
    for k in p.jump_idx:
        # equal up to the rounding of shifting later values by the jump
        assert np.allclose(g(t, p), g(t, remove_jump(p, int(k))), rtol=0, atol=1e-13)


def test_gamma_derivative_matches_identity():
    F = make_functional("square")
    p = stop(_const_path(0.5), 0.25)
    v = gamma_derivative(F, make_direction("const:2"), 0.25, p).value
    assert v == pytest.approx(2 * 0.5 * 2, abs=1e-7)


def test_gamma_derivative_at_T():
    with pytest.raises(OutOfDomainError):
        gamma_derivative(make_functional("square"), make_direction("zero"), 1.0, _const_path(1.0))


@given(grid_paths(min_n=10))
def test_vectorized_gamma_derivative(p):
    F = make_functional("mixed-cyl")
    g = make_direction("running-mean")
    vec = gamma_derivative_along(F, g, p)
    k = p.times.size // 2
    t = float(p.times[k])
    assert vec[k] == pytest.approx(gamma_derivative(F, g, t, p).value, abs=1e-5)


def test_registry_docs_cover_ids():
    from pathcalc.flow import DIRECTION_DOCS
    assert set(DIRECTION_IDS) == set(DIRECTION_DOCS)
