import warnings

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from latentpp.estimands import EstimandRequest
from latentpp.estimators import HardEmEstimator, NaiveEstimator, OracleEstimator, SemEstimator
from latentpp.hardem import HardEmConfig
from latentpp.model import Allocation
from latentpp.presets import benchmark_setup
from latentpp.sem import SemConfig
from latentpp.simulate import simulate


@pytest.fixture(scope="module")
def data():
    cfg = benchmark_setup(seed=4, t_end=30.0)
    return cfg, simulate(cfg).catalog, simulate(cfg, rep=1).catalog


def make(cls, cfg, **kw):
    return cls(tess=cfg.tess, allocation=cfg.allocation, template=cfg.params, **kw)


def test_get_params_and_clone(data):
    cfg, _, _ = data
    est = make(NaiveEstimator, cfg, free=["mu0", "mu1"])
    params = est.get_params()
    assert params["free"] == ["mu0", "mu1"] and params["include_pre"] is True
    other = clone(est).set_params(include_pre=False)
    assert other.include_pre is False and est.include_pre is True


def test_unfitted_estimator_raises(data):
    cfg, cat, _ = data
    with pytest.raises(NotFittedError):
        make(NaiveEstimator, cfg).predict(cat)


def test_naive_and_oracle_fit_predict_score(data):
    cfg, cat, other = data
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        naive = make(NaiveEstimator, cfg).fit(cat)
        oracle = make(OracleEstimator, cfg).fit(cat)
    assert np.array_equal(oracle.predict(cat), cat.truth)
    assert naive.theta_.shape == cfg.params.vector().shape
    assert oracle.score(cat, cat.truth) == pytest.approx(oracle.score(cat))
    bits = naive.predict(other)
    assert bits.shape == (other.n_post,) and set(np.unique(bits)) <= {0, 1}
    assert np.isfinite(naive.score(other))
    # y overrides the catalog's own labels
    flipped = 1 - cat.truth
    alt = make(OracleEstimator, cfg, free=["mu0", "mu1"]).fit(cat, flipped)
    assert np.array_equal(alt.labelling_.bits, flipped)


def test_sem_and_hardem_estimators(data):
    cfg, cat, _ = data
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sem = make(SemEstimator, cfg, config=SemConfig(n_outer=2, n_inner=2, n_proposals=3, retain_top=2)).fit(cat)
        hard = make(HardEmEstimator, cfg, config=HardEmConfig(n_blocks=3, free=["mu0", "mu1", "K00", "K11"]))
        hard.fit(cat, cat.truth)
    assert len(sem.trace_.best_loglik) >= 1 and sem.loglik_ == pytest.approx(max(sem.trace_.best_loglik))
    assert len(hard.trace_.e) == 3 and hard.trace_.e[0] is not None
    rep = hard.effect(EstimandRequest("daite", z=cfg.allocation, z_b=Allocation.all_control(cfg.tess.n_cells),
                                      n_reps=5), cfg.window, cfg.t_star)
    assert np.isfinite(rep.estimate)


def test_oracle_needs_truth(data):
    cfg, cat, _ = data
    blind = cat.without_labels()
    assert blind.catalog_id == cat.catalog_id and not blind.has_truth
    with pytest.raises(ValueError):
        make(OracleEstimator, cfg).fit(blind)
