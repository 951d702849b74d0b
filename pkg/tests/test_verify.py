import warnings

import numpy as np
import pytest

from pathcalc.flow import make_direction
from pathcalc.functional import make_functional
from pathcalc.verify import (FORMULAS, HypothesisViolation, HypothesisWarning, jump_bookkeeping,
                             make_model, mc_report, residual)


def test_unknown_ids():
    m = make_model("bm")
    with pytest.raises(KeyError):
        residual("nope", make_functional("square"), m, m.simulate(16, 0, 0))
    with pytest.raises(KeyError):
        make_model("nope")


@pytest.mark.parametrize("formula,fid,model,tol", [
    ("cont-ito", "square", "bm", 1e-8),
    ("cont-ito", "smooth-cyl", "bm:2", 1e-4),
    ("cadlag-ito", "smooth-cyl", "jump-diffusion", 1e-3),
    ("strat", "smooth-cyl", "jump-diffusion", 0.05),
    ("levy", "smooth-cyl", "jump-diffusion", 0.2),
    ("levy-type", "square", "levy-type", 0.3),
    ("optimal", "smooth-cyl", "jump-diffusion", 0.2),
    ("local-time-ito", "power:3", "bm", 0.05),
])
def test_residual_small(formula, fid, model, tol):
    m = make_model(model, d=2 if model.endswith(":2") else 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HypothesisWarning)
        r = residual(formula, make_functional(fid, d=m.d), m, m.simulate(1024, 3, 0))
    assert set(r.terms) == set(FORMULAS[formula].terms)
    assert abs(r.residual) <= tol


def test_gamma_strat_closes():
    m = make_model("bm")
    r = residual("gamma-strat", make_functional("square"), m, m.simulate(512, 1, 0),
                 direction=make_direction("self"))
    assert abs(r.residual) < 1e-10


def test_direction_required():
    m = make_model("bm")
    with pytest.raises(HypothesisViolation):
        residual("gamma-optimal", make_functional("square"), m, m.simulate(64, 0, 0))


def test_app_formulas_have_own_driver():
    m = make_model("bm")
    with pytest.raises(HypothesisViolation):
        residual("asian", make_functional("square"), m, m.simulate(64, 0, 0))


def test_wrong_model_kind():
    m = make_model("levy-type")
    with pytest.raises(HypothesisViolation):
        residual("levy", make_functional("square"), m, m.simulate(64, 0, 0))


def test_regularity_and_continuity_warnings():
    m = make_model("bm")
    with pytest.warns(HypothesisWarning, match="tagged C00"):
        residual("cont-ito", make_functional("max-to-date"), m, m.simulate(64, 0, 0))
    j = make_model("compound-poisson")
    lp = j.simulate(256, 2, 0)
    assert lp.X.jump_idx.size
    with pytest.warns(HypothesisWarning, match="continuous"):
        residual("cont-ito", make_functional("square"), j, lp)


def test_jump_bookkeeping():
    m = make_model("jump-diffusion")
    assert jump_bookkeeping(make_functional("smooth-cyl"), m.simulate(512, 4, 0)) < 1e-12


def test_mc_report_worker_invariance():
    m = make_model("jump-diffusion")
    F = make_functional("smooth-cyl")
    a = mc_report("cadlag-ito", F, m, 6, (128, 512), seed=9, workers=1)
    b = mc_report("cadlag-ito", F, m, 6, (128, 512), seed=9, workers=4)
    for n in (128, 512):
        assert np.array_equal(a.residuals(n), b.residuals(n))
    assert a.rms(512) < a.rms(128)


def test_mc_report_needs_two_paths():
    with pytest.raises(ValueError):
        mc_report("cont-ito", make_functional("square"), make_model("bm"), 1)
