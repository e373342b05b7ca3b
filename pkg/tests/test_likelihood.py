import math
import warnings

import numpy as np
import pytest

from latentpp.likelihood import (
    Labelling,
    compensator,
    complete_data_loglik,
    event_intensities,
    loglik_gradient,
    observed_loglik_enumerate,
    observed_loglik_poisson,
    per_flip_delta,
)
from latentpp.model import (
    Allocation,
    EventCatalog,
    ExpGaussKernel,
    GridTessellation,
    ModelParams,
    SpaceTimePoint,
    Window,
    _full_labels,
    evaluate_intensity,
)
from latentpp.presets import benchmark_setup
from latentpp.simulate import simulate

from conftest import random_instance

W = Window.square(0.0, 20.0, 10.0)
TESS = GridTessellation(W.region, 2, 1)
Z = Allocation([0, 1])


def poisson(mu0=1.0, mu1=2.0, units="density"):
    return ModelParams([mu0, mu1], ExpGaussKernel(np.zeros((2, 2)), 1.0, 1.0), mu_units=units)


def test_poisson_single_event_closed_form():
    p = poisson(0.3, 0.7)
    cat = EventCatalog([12.0], [7.5], [5.0], 10.0, W)
    rep = complete_data_loglik(p, cat, [1], Z, TESS)
    # post window: 10 time units; component 0 active on cell 0, 1 on cell 1 (area 50 each)
    expected = math.log(0.7) - (0.3 * 50 * 10 + 0.7 * 50 * 10)
    assert rep.value == pytest.approx(expected, abs=1e-12)
    assert rep.reconstruct() == pytest.approx(rep.value, rel=1e-10)


def test_symmetric_model_invariant_to_global_flip():
    for seed in range(3):
        params, cat, bits, tess, alloc = random_instance(seed)
        K = params.kernel
        sym = ModelParams([1.5, 1.5], ExpGaussKernel(np.full((2, 2), K.K[0, 0]), K.beta[0, 0], K.alpha[0, 0],
                                                     normalized=K.normalized), mu_units="total", gating="none")
        a = complete_data_loglik(sym, cat, bits, alloc, tess, start=cat.t_star).value
        b = complete_data_loglik(sym, cat, 1 - bits, alloc, tess, start=cat.t_star).value
        assert a == pytest.approx(b, abs=1e-9)


def test_truth_beats_halved_control_branching():
    wins = 0
    for rep in range(100):
        cfg = benchmark_setup(seed=500 + rep, allocation_seed=0)
        cat = simulate(cfg).catalog
        good = complete_data_loglik(cfg.params, cat, None, cfg.allocation, cfg.tess).value
        bad = complete_data_loglik(cfg.params.with_values(K00=0.4), cat, None, cfg.allocation, cfg.tess).value
        wins += good > bad
    assert wins >= 95


def test_report_reconstructs_and_clips():
    params, cat, bits, tess, alloc = random_instance(1)
    rep = complete_data_loglik(params, cat, bits, alloc, tess)
    assert rep.reconstruct() == pytest.approx(rep.value, rel=1e-10)
    assert rep.n_clipped >= 0


def test_compensator_closed_forms_and_additivity():
    p = poisson(0.3, 0.7)
    cat = EventCatalog([], [], [], 10.0, W)
    assert compensator(p, cat, None, Z, TESS, 1) == pytest.approx(0.7 * 50 * 10)
    params, cat, bits, tess, alloc = random_instance(2)
    u = 17.3
    for k in (0, 1):
        whole = compensator(params, cat, bits, alloc, tess, k)
        split = compensator(params, cat, bits, alloc, tess, k, upto=u) + \
            compensator(params, cat, bits, alloc, tess, k, start=u)
        assert split == pytest.approx(whole, abs=1e-9)


def test_single_event_kernel_mass_near_untruncated_limit():
    big = Window.square(0.0, 40.0, 200.0)
    tess = GridTessellation(big.region, 1, 1)
    kern = ExpGaussKernel(np.diag([0.8, 0.0]), 10.0, 0.01)
    p = ModelParams([0.0, 0.0], kern, gating="none")
    cat = EventCatalog([20.0], [100.0], [100.0], 10.0, big, label=[0])
    mass = compensator(p, cat, [0], Allocation([0]), tess, 0)
    assert mass == pytest.approx(0.8 / 10 * math.pi / 0.01, rel=0.01)


def test_poisson_gradient_closed_form():
    p = poisson(0.3, 0.7)
    cat = EventCatalog([11.0, 12.0, 13.0], [2.0, 7.0, 8.0], [5.0, 5.0, 5.0], 10.0, W)
    g = loglik_gradient(p, cat, [0, 1, 1], Z, TESS)
    assert g[0] == pytest.approx(1 / 0.3 - 500, rel=1e-10)
    assert g[1] == pytest.approx(2 / 0.7 - 500, rel=1e-10)


def test_gradient_matches_central_differences():
    for seed in range(5):
        params, cat, bits, tess, alloc = random_instance(seed)
        g = loglik_gradient(params, cat, bits, alloc, tess)
        v = params.vector()
        for i in range(v.size):
            e = 1e-5 * max(abs(v[i]), 1e-3)
            vp, vm = v.copy(), v.copy()
            vp[i] += e
            vm[i] -= e
            fp = complete_data_loglik(params.with_vector(vp), cat, bits, alloc, tess).value
            fm = complete_data_loglik(params.with_vector(vm), cat, bits, alloc, tess).value
            fd = (fp - fm) / (2 * e)
            assert abs(g[i] - fd) <= 1e-4 * max(abs(fd), 1.0)


def test_per_flip_poisson_closed_form():
    p = poisson(0.3, 0.7, units="density")
    p = ModelParams(p.mu, p.kernel, gating="none")
    cat = EventCatalog([11.0, 12.0], [2.0, 7.0], [5.0, 5.0], 10.0, W)
    d = per_flip_delta(p, cat, [0, 1], 0, Z, TESS)
    assert d == pytest.approx(math.log(0.7) - math.log(0.3), abs=1e-12)


def test_per_flip_empty_forward_cone_matches_poisson_form():
    params, cat, bits, tess, alloc = random_instance(3)
    i = cat.n_post - 1
    u = float(cat.t[-1])  # window ends at the last event: empty forward cone
    labels = _full_labels(cat, bits)
    lam = event_intensities(params, cat, labels, tess, alloc, [cat.n_pre + i])[0]
    lam = np.maximum(lam, params.mu_min)
    r = bits[i]
    expected = math.log(lam[1 - r]) - math.log(lam[r])
    assert per_flip_delta(params, cat, bits, i, alloc, tess, upto=u) == pytest.approx(expected, abs=1e-10)


def test_per_flip_matches_full_recompute():
    rng = np.random.default_rng(0)
    params, cat, bits, tess, alloc = random_instance(4)
    base = complete_data_loglik(params, cat, bits, alloc, tess).value
    for i in rng.integers(0, cat.n_post, 100):
        d = per_flip_delta(params, cat, bits, int(i), alloc, tess)
        flipped = bits.copy()
        flipped[i] = 1 - flipped[i]
        full = complete_data_loglik(params, cat, flipped, alloc, tess).value - base
        assert abs(d - full) < 1e-8


def test_label_induced_equals_oracle_intensity_at_truth():
    cfg = benchmark_setup(seed=1, t_end=40.0)
    cat = simulate(cfg).catalog
    idx = np.arange(cat.n_pre, cat.n)
    a = event_intensities(cfg.params, cat, cat.label, cfg.tess, cfg.allocation, idx)
    for j in idx[::25]:
        pt = SpaceTimePoint(cat.t[j], cat.x[j], cat.y[j])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            b = evaluate_intensity(cfg.params, cat, None, pt, cfg.allocation, cfg.tess)
        assert np.allclose(a[j - cat.n_pre], b, rtol=1e-13, atol=0)


def test_prefix_additivity():
    params, cat, bits, tess, alloc = random_instance(5)
    u = 0.5 * (cat.t_star + cat.window.t_end)
    whole = complete_data_loglik(params, cat, bits, alloc, tess).value
    a = complete_data_loglik(params, cat, bits, alloc, tess, upto=u).value
    b = complete_data_loglik(params, cat, bits, alloc, tess, start=u).value
    assert a + b == pytest.approx(whole, abs=1e-9)


def test_enumeration_matches_factorised_poisson():
    rng = np.random.default_rng(7)
    for n in (1, 5, 12):
        t = np.sort(rng.uniform(10.0, 20.0, n))
        cat = EventCatalog(t, rng.uniform(0, 10, n), rng.uniform(0, 10, n), 10.0, W)
        p = ModelParams([0.3, 0.9], ExpGaussKernel(np.zeros((2, 2)), 1.0, 1.0), gating="none")
        a = observed_loglik_enumerate(p, cat, Z, TESS)
        b = observed_loglik_poisson(p, cat, Z, TESS)
        assert a == pytest.approx(b, abs=1e-10)


def test_labelling_helpers():
    lab = Labelling([0, 1, 1])
    assert lab.hamming([1, 1, 1]) == 1
    assert lab.flipped([0]).bits.tolist() == [1, 1, 1]
    with pytest.raises(ValueError):
        Labelling([0, 2])
