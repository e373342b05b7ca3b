import numpy as np
import pytest

from latentpp.model import Allocation, ExpGaussKernel, GridTessellation, ModelParams, Window
from latentpp.presets import benchmark_params, benchmark_setup
from latentpp.simulate import SimConfig, simulate, simulate_counterfactual

from conftest import random_hawkes, small_design


def poisson_params(mu, units="total"):
    return ModelParams([mu, mu], ExpGaussKernel(np.zeros((2, 2)), 1.0, 1.0), mu_units=units)


def test_poisson_mean_count():
    window = Window.square(0.0, 100.0, 100.0)
    tess = GridTessellation(window.region, 1, 1)
    cfg = SimConfig(poisson_params(8.0), window, 50.0, tess, Allocation.all_control(1), seed=11)
    counts = [simulate(cfg, rep=r).catalog.n for r in range(200)]
    assert abs(np.mean(counts) / 800.0 - 1) < 0.02


def test_poisson_density_units():
    window = Window.square(0.0, 10.0, 10.0)
    tess = GridTessellation(window.region, 1, 1)
    cfg = SimConfig(poisson_params(0.5, "density"), window, 5.0, tess, Allocation.all_control(1), seed=2)
    counts = [simulate(cfg, rep=r).catalog.n for r in range(200)]
    assert abs(np.mean(counts) / 500.0 - 1) < 0.02


def test_benchmark_treated_share_between_regimes(benchmark):
    cfg, cat = benchmark
    post = slice(cat.n_pre, cat.n)
    share = np.mean(cat.label[post] == 1)
    # all-control gives share 0, all-treated share 1; with K_t < K_c the
    # treated component also falls below its background share
    assert 0.0 < share < cfg.allocation.z.mean() < 1.0
    assert np.all(cat.label[: cat.n_pre] == 0)
    assert np.all(cat.label[post] >= 0)


def test_simulation_is_deterministic():
    window, t_star, tess, alloc = small_design()
    p = random_hawkes(np.random.default_rng(4))
    cfg = SimConfig(p, window, t_star, tess, alloc, seed=9)
    a, b = simulate(cfg, rep=3).catalog, simulate(cfg, rep=3).catalog
    for col in ("t", "x", "y", "label"):
        assert getattr(a, col).tobytes() == getattr(b, col).tobytes()
    assert simulate(cfg, rep=4).catalog.n != a.n or not np.array_equal(simulate(cfg, rep=4).catalog.t, a.t)


def test_branching_and_thinning_agree():
    window, t_star, tess, alloc = small_design()
    p = random_hawkes(np.random.default_rng(1))
    stats = []
    for method in ("branching", "thinning"):
        cfg = SimConfig(p, window, t_star, tess, alloc, seed=5 if method == "branching" else 6, method=method)
        n = np.array([simulate(cfg, rep=r).catalog.n for r in range(500)])
        stats.append((n.mean(), n.std(ddof=1) / np.sqrt(n.size)))
    (m1, s1), (m2, s2) = stats
    assert abs(m1 - m2) < 3 * np.hypot(s1, s2)


def test_supercritical_branching_rejected():
    window, t_star, tess, alloc = small_design()
    kern = ExpGaussKernel.diagonal(1.2, 0.2, 1.0, 0.1, normalized=True)
    cfg = SimConfig(ModelParams([1.0, 1.0], kern, mu_units="total"), window, t_star, tess, alloc)
    with pytest.raises(ValueError, match="spectral radius"):
        simulate(cfg)


def test_explosion_guard():
    window, t_star, tess, alloc = small_design(t_end=200.0)
    kern = ExpGaussKernel.diagonal(0.95, 0.95, 0.2, 0.1, normalized=True)
    cfg = SimConfig(ModelParams([50.0, 50.0], kern, mu_units="total"), window, t_star, tess, alloc, max_events=500)
    with pytest.raises(RuntimeError, match="explosion guard"):
        simulate(cfg)


def test_counterfactual_gating_and_direction():
    cfg = benchmark_setup(seed=0, t_end=40.0)
    J = cfg.tess.n_cells
    ctrl = simulate_counterfactual(cfg.params, cfg.window, cfg.t_star, cfg.tess, Allocation.all_control(J), 40, 1)
    trt = simulate_counterfactual(cfg.params, cfg.window, cfg.t_star, cfg.tess, Allocation.all_treated(J), 40, 1)
    assert np.all(ctrl.per_component[:, 1] == 0)
    assert np.all(ctrl.immigrants[:, 1] == 0)
    assert ctrl.total.mean() > trt.total.mean()


def test_counterfactual_control_regime_ignores_treated_kernel():
    cfg = benchmark_setup(seed=0, t_end=40.0)
    J = cfg.tess.n_cells
    other = benchmark_params(K_treated=0.6)
    a = simulate_counterfactual(cfg.params, cfg.window, cfg.t_star, cfg.tess, Allocation.all_control(J), 20, 3)
    b = simulate_counterfactual(other, cfg.window, cfg.t_star, cfg.tess, Allocation.all_control(J), 20, 3)
    assert np.array_equal(a.total, b.total)


def test_counterfactual_single_draw_reproducible():
    cfg = benchmark_setup(seed=0, t_end=30.0)
    a = simulate_counterfactual(cfg.params, cfg.window, cfg.t_star, cfg.tess, cfg.allocation, 1, 8)
    b = simulate_counterfactual(cfg.params, cfg.window, cfg.t_star, cfg.tess, cfg.allocation, 1, 8)
    assert a.total.tolist() == b.total.tolist() and np.array_equal(a.per_cell, b.per_cell)
