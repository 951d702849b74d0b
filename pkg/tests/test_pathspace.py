import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathcalc.pathspace import (GridMismatchError, GridPath, TimedPath, bump, concat, continuous_part,
                                dist_star, from_csv, remove_jump, restrict, stop, stop_pre, to_csv)
from strategies import grid_paths, node_time


def test_constructor_checks():
    with pytest.raises(ValueError):
        GridPath([0.1, 1.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        GridPath([0.0, 0.5, 0.5], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 2.0], [0], [[0.0]])
    with pytest.raises(ValueError):
        GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 2.0], [1, 1], [[0.0], [0.0]])


def test_index_off_grid():
    p = GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(GridMismatchError):
        p.index(0.3)


def test_jump_accessors():
    p = GridPath([0.0, 0.5, 1.0], [0.0, 1.0, 2.0], [2], [[1.5]])
    assert p.left_limit(2)[0] == 1.5
    assert p.jumps()[0, 0] == 0.5
    assert np.allclose(p.left_values()[:, 0], [0.0, 1.0, 1.5])


@given(grid_paths(), st.floats(0, 1))
def test_stop_idempotent_and_non_anticipative(p, frac):
    t = node_time(p, frac)
    q = stop(p, t)
    assert stop(q, t) == q
    k = p.index(t)
    assert np.all(q.values[k:] == p.values[k])
    assert np.all(q.values[:k + 1] == p.values[:k + 1])


@given(grid_paths(), st.floats(0, 1))
def test_stop_pre_freezes_left_limit(p, frac):
    t = node_time(p, frac)
    k = p.index(t)
    q = stop_pre(p, t)
    assert np.all(q.values[k:] == p.left_limit(k))
    assert not np.any(q.jump_idx >= k)


@given(grid_paths(), st.floats(0, 1), st.floats(-2, 2))
def test_bump_shifts_plateau(p, frac, h):
    t = node_time(p, frac)
    k = p.index(t)
    q = bump(p, t, h)
    assert np.allclose(q.values[k:] - stop(p, t).values[k:], h)
    assert np.all(q.values[:k] == p.values[:k])
    if h == 0:
        assert np.all(bump(p, t, 0.0).values == stop(p, t).values)


@given(grid_paths(), grid_paths(), st.floats(0, 1), st.floats(0, 1))
def test_dist_star_metric_properties(a, b, fa, fb):
    A, B = TimedPath.at(a, fa), TimedPath.at(b, fb)
    assert dist_star(A, A) == 0.0
    assert dist_star(A, B) == pytest.approx(dist_star(B, A))
    C = TimedPath.at(a, 1.0)
    assert dist_star(A, C) <= dist_star(A, B) + dist_star(B, C) + 1e-12


@given(grid_paths(d=2))
def test_csv_round_trip(p):
    assert from_csv(to_csv(p)) == p


@given(grid_paths())
def test_continuous_part_removes_jumps(p):
    c = continuous_part(p)
    assert c.jump_idx.size == 0
    inc_c = np.diff(c.values, axis=0)
    inc_p = np.diff(p.values, axis=0)
    mask = np.ones(inc_p.shape[0], dtype=bool)
    mask[p.jump_idx - 1] = False
    assert np.allclose(inc_c[mask], inc_p[mask])


@given(grid_paths())
def test_remove_jump_then_continuous_part(p):
    if p.jump_idx.size == 0:
        return
    k = int(p.jump_idx[0])
    q = remove_jump(p, k)
    assert k not in q.jump_idx
    assert np.allclose(continuous_part(q).values, continuous_part(p).values, atol=1e-12)


@given(grid_paths(), st.floats(0.1, 0.9))
def test_restrict_concat_round_trip(p, frac):
    s = node_time(p, frac)
    if s == 0.0 or s == p.T:
        return
    a = restrict(p, 0.0, s)
    b = restrict(p, s, p.T)
    q = concat(a, s, b)
    assert np.allclose(q.times, p.times)
    assert np.all(q.values == p.values)
