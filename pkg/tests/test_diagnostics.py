import warnings

import numpy as np
import pytest

from latentpp.diagnostics import (
    band_curve,
    band_mass,
    residual_counts,
    time_rescaling_test,
    window_envelope,
)
from latentpp.model import Allocation, EventCatalog, ExpGaussKernel, GridTessellation, ModelParams, Window
from latentpp.presets import benchmark_setup
from latentpp.simulate import SimConfig, simulate

from conftest import random_hawkes, small_design

W = Window.square(0.0, 20.0, 10.0)
TESS = GridTessellation(W.region, 2, 1)
Z = Allocation([0, 1])


def poisson(mu0, mu1):
    return ModelParams([mu0, mu1], ExpGaussKernel(np.zeros((2, 2)), 1.0, 1.0), gating="none")


def test_constant_rate_rescaling_closed_form():
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 20, 30))
    cat = EventCatalog(t, rng.uniform(0, 10, 30), rng.uniform(0, 10, 30), 10.0, W)
    p = poisson(0.02, 0.03)
    rep = time_rescaling_test(p, cat, np.zeros(cat.n_post, dtype=int), Z, TESS, residuals=False)
    # control only before t_star, both components after
    lam = 0.02 * 100.0 * np.minimum(t, 10.0) + 0.05 * 100.0 * np.clip(t - 10.0, 0.0, None)
    assert np.allclose(rep.rescaled, lam, rtol=1e-12, atol=1e-12)
    post = t > 10.0
    assert np.allclose(rep.gaps[1:][post[1:] & post[:-1]], 5.0 * np.diff(t)[post[1:] & post[:-1]], rtol=1e-12)
    assert np.all(rep.rescaled >= 0)
    assert 0 <= rep.p_value <= 1


def test_rescaling_needs_two_events():
    cat = EventCatalog([12.0], [1.0], [1.0], 10.0, W)
    with pytest.raises(ValueError):
        time_rescaling_test(poisson(0.1, 0.1), cat, [0], Z, TESS)


def test_rescaled_times_monotone_on_hawkes_data():
    window, t_star, tess, alloc = small_design()
    p = random_hawkes(np.random.default_rng(3))
    cat = simulate(SimConfig(p, window, t_star, tess, alloc, seed=1)).catalog
    rep = time_rescaling_test(p, cat, None, alloc, tess)
    assert np.all(np.diff(rep.rescaled) >= 0)
    assert rep.residuals.shape == (2, tess.n_cells)
    assert rep.to_dict()["n"] == cat.n


def test_residual_centering_at_truth():
    window, t_star, tess, alloc = small_design()
    p = random_hawkes(np.random.default_rng(5))
    ok = 0
    for r in range(40):
        cat = simulate(SimConfig(p, window, t_star, tess, alloc, seed=6), rep=r).catalog
        res = residual_counts(p, cat, None, alloc, tess)
        comp = res.sum(axis=1)
        n_k = np.array([np.sum(cat.label[cat.n_pre:] == k) for k in range(2)])
        lam = n_k - comp
        z = np.abs(comp) / np.sqrt(np.maximum(lam, 1e-12))
        ok += bool(np.all(z < 4))
    assert ok >= 39


def test_band_symmetric_components_cover_everything():
    rng = np.random.default_rng(1)
    cat = EventCatalog(np.sort(rng.uniform(10, 20, 10)), rng.uniform(0, 10, 10), rng.uniform(0, 10, 10), 10.0, W)
    p = poisson(0.02, 0.02)
    rep = band_mass(p, cat, TESS, Z, np.zeros(10, dtype=int), b=1e6, raster=(10, 5))
    assert rep.C_b == pytest.approx(0.04, rel=1e-12)
    assert rep.C_b_events == pytest.approx(10 / 1000.0)


def test_band_widely_separated_backgrounds_is_empty():
    rng = np.random.default_rng(1)
    cat = EventCatalog(np.sort(rng.uniform(10, 20, 10)), rng.uniform(0, 10, 10), rng.uniform(0, 10, 10), 10.0, W)
    p = poisson(0.02, 0.02 * np.exp(5))
    rep = band_mass(p, cat, TESS, Z, np.zeros(10, dtype=int), b=0.5, raster=(10, 5))
    assert rep.C_b == pytest.approx(0.0, abs=1e-12)
    assert rep.C_b_events == 0.0


def test_band_mass_monotone_in_b_on_benchmark():
    cfg = benchmark_setup(seed=2, t_end=30.0)
    cat = simulate(cfg).catalog
    bs = [0.1, 0.5, 1.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        reps = [band_mass(cfg.params, cat, cfg.tess, cfg.allocation, None, b=b, raster=(20, 20), check=False)
                for b in bs]
    c = [r.C_b for r in reps]
    assert c[0] <= c[1] <= c[2]
    assert [r.C_b_events for r in reps] == sorted(r.C_b_events for r in reps)
    curve = band_curve(cfg.params, cat, cfg.tess, cfg.allocation, bs, raster=(20, 20))
    assert np.allclose(curve, c, rtol=1e-12)


def test_band_rejects_nonpositive_threshold():
    cat = EventCatalog([12.0], [1.0], [1.0], 10.0, W)
    with pytest.raises(ValueError):
        band_mass(poisson(0.1, 0.1), cat, TESS, Z, [0], b=0.0)


def test_envelope_single_and_pairs():
    one = EventCatalog([12.0], [1.0], [1.0], 10.0, W)
    assert window_envelope(one, 1.0, 1.0).n_star == 0
    two = EventCatalog([12.0, 12.5], [1.0, 1.5], [1.0, 1.2], 10.0, W)
    assert window_envelope(two, 1.0, 1.0).n_star == 1
    far = EventCatalog([12.0, 14.5], [1.0, 1.5], [1.0, 1.2], 10.0, W)
    assert window_envelope(far, 1.0, 1.0).n_star == 0
    same_time = EventCatalog([12.0, 12.0], [1.0, 1.5], [1.0, 1.2], 10.0, W)
    assert window_envelope(same_time, 1.0, 1.0).n_star == 0
    with pytest.raises(ValueError):
        window_envelope(one, 0.0, 1.0)


def test_envelope_with_params_adds_kernel_and_background():
    p = ModelParams([0.1, 0.2], ExpGaussKernel.diagonal(0.5, 0.2, 1.0, 0.5), gating="none")
    two = EventCatalog([12.0, 12.5], [1.0, 1.5], [1.0, 1.2], 10.0, W)
    rep = window_envelope(two, 1.0, 1.0, p)
    assert rep.K_win_hat == pytest.approx(float(np.max(p.kernel.sup(None))) + 0.2)
