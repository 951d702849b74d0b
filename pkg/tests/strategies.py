"""Hypothesis strategies for grid paths."""
import numpy as np
from hypothesis import strategies as st

from pathcalc.pathspace import GridPath


@st.composite
def grid_paths(draw, d=1, min_n=2, max_n=40, jumps=True):
    n = draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    times = np.concatenate([[0.0], np.cumsum(rng.uniform(0.1, 1.0, n))])
    times = times / times[-1]
    inc = rng.standard_normal((n, d)) * 0.3
    vals = np.vstack([np.zeros((1, d)), np.cumsum(inc, axis=0)])
    if not jumps:
        return GridPath(times, vals)
    k = draw(st.lists(st.integers(1, n), max_size=3, unique=True))
    k = np.array(sorted(k), dtype=int)
    pre = vals[k] - rng.choice([-1.0, 1.0], size=(k.size, d)) * rng.uniform(0.2, 1.0, (k.size, d))
    return GridPath(times, vals, k, pre)


def node_time(p, frac):
    k = int(round(frac * (p.times.size - 1)))
    return float(p.times[k])
