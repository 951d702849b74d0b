import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathcalc.levy import JumpComponent, LevyTriplet, brownian_paths
from pathcalc.localtime import (LocalTimeContext, SpaceFunction, check_L_bound, gauss_legendre_01,
                                local_time_batch, local_time_integral, op_A, op_AI, op_I, op_L)
from pathcalc.pathspace import GridPath


def _ctx(seed, n=1024, m=1):
    t = np.linspace(0, 1, n + 1)
    return LocalTimeContext.brownian(GridPath(t, brownian_paths(1, n, d=m, seed=seed)[0]))


@given(st.integers(0, 1000), st.floats(-5, 5))
def test_constant_gives_zero(seed, c):
    ctx = _ctx(seed, 128)
    f = SpaceFunction.of_b(lambda b: np.full(b.shape[:-1], c))
    assert local_time_integral(f, ctx) == 0.0


@given(st.integers(0, 1000))
def test_linear_gives_minus_realized_qv(seed):
    ctx = _ctx(seed, 256)
    b = ctx.B.values[:, 0]
    v = local_time_integral(SpaceFunction.of_b(lambda x: x[..., 0]), ctx)
    assert v == pytest.approx(-float(np.sum(np.diff(b) ** 2)), abs=1e-12)


def test_unfrozen_variant_differs_for_time_dependent_f():
    ctx = _ctx(1, 256)
    f = SpaceFunction(lambda t, b, n: t * b[..., 0])
    a = local_time_integral(f, ctx, freeze=True)
    b = local_time_integral(f, ctx, freeze=False)
    assert a != b and abs(a - b) < 0.1


def test_batch_matches_single():
    n = 128
    t = np.linspace(0, 1, n + 1)
    B = brownian_paths(3, n, seed=2)
    f = SpaceFunction.of_b(lambda b: np.sin(b[..., 0]))
    batch = local_time_batch(f, t, B)
    single = [local_time_integral(f, LocalTimeContext.brownian(GridPath(t, b))) for b in B]
    assert np.allclose(batch, single)


def test_gauss_legendre_weights():
    s, w = gauss_legendre_01()
    assert w.sum() == pytest.approx(1.0) and np.all((s > 0) & (s < 1))
    assert float(w @ s ** 5) == pytest.approx(1 / 6)


def test_op_I_antiderivative():
    F = SpaceFunction.of_b(lambda b: b[..., 0])
    g = op_I(F, 0)
    b = np.array([[0.7], [-1.2]])
    assert np.allclose(g(0.0, b), b[:, 0] ** 2 / 2, atol=1e-10)


def test_op_A_atom_oracle():
    # c f''(b) + rate * int_0^1 (f'(b + s a) - f'(b)) a ds for f = b^3
    tr = LevyTriplet([0.0], [[1.0]], [JumpComponent(2.0, "atom", {"atoms": [[0.5]]})])
    F = SpaceFunction.of_b(lambda b: b[..., 0] ** 3, grad=lambda b: 3 * b ** 2)
    b = np.array([[0.3]])
    a = 0.5
    exact = 6 * 0.3 + 2.0 * a * (3 * ((0.3 + a) ** 3 - 0.3 ** 3) / (3 * a) - 3 * 0.3 ** 2)
    assert op_A(F, 0, tr)(0.0, b)[0] == pytest.approx(exact, rel=1e-7)


def test_op_AI_composition():
    tr = LevyTriplet([0.0], [[1.0]], [JumpComponent(1.0, "atom", {"atoms": [[0.4], [-0.3]]})])
    G = SpaceFunction.of_b(lambda b: np.sin(b[..., 0]))
    b = np.array([[0.2], [1.1]])
    lhs = op_A(op_I(G, 0), 0, tr, 0.5)(0.0, b)
    rhs = op_AI(G, 0, tr, 0.5)(0.0, b)
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_op_L_needs_one_function_per_coordinate():
    ctx = _ctx(0, 64, m=2)
    with pytest.raises(ValueError):
        op_L([SpaceFunction.of_b(lambda b: b[..., 0])], ctx)


def test_L_bound_small_run():
    r = check_L_bound(SpaceFunction.of_b(lambda b: b[..., 0]), n_paths=500, n_steps=256, seed=3)
    assert r.passed and r.lhs > 0
