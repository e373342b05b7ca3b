import numpy as np
import pytest

from latentpp.estimands import (
    EstimandRequest,
    estimate,
    estimate_lipschitz,
    mean_measure,
    parametric_bootstrap,
    transfer_bound_check,
)
from latentpp.model import Allocation, ExpGaussKernel, GridTessellation, ModelParams, Window
from latentpp.presets import benchmark_setup

from conftest import small_design


def design():
    window, t_star, tess, alloc = small_design(t_end=25.0)
    kern = ExpGaussKernel.diagonal(0.6, 0.2, 1.0, 0.3, normalized=True)
    return ModelParams([3.0, 3.0], kern, mu_units="total"), window, t_star, tess, alloc


def test_symmetric_components_give_zero_daite():
    _, window, t_star, tess, alloc = design()
    kern = ExpGaussKernel.diagonal(0.5, 0.5, 1.0, 0.3, normalized=True)
    p = ModelParams([3.0, 3.0], kern, mu_units="total")
    J = tess.n_cells
    rep = estimate(p, tess, window, t_star, EstimandRequest("daite", z=alloc, z_b=Allocation.all_control(J),
                                                            n_reps=300, seed=1))
    assert abs(rep.estimate) <= 3 * rep.mcse


def test_benchmark_daite_control_minus_treated_positive():
    cfg = benchmark_setup(seed=0, t_end=30.0)
    J = cfg.tess.n_cells
    req = EstimandRequest("daite", z=Allocation.all_control(J), z_b=Allocation.all_treated(J), n_reps=20, seed=2,
                          per_unit_time=True)
    rep = estimate(cfg.params, cfg.tess, cfg.window, cfg.t_star, req)
    assert rep.estimate > 3 * rep.mcse > 0
    assert rep.horizon == pytest.approx(20.0)


def test_singleton_taite_equals_aite_and_aite_is_mean_ite():
    p, window, t_star, tess, alloc = design()
    aite = estimate(p, tess, window, t_star, EstimandRequest("aite", z=alloc, n_reps=40, seed=3))
    taite = estimate(p, tess, window, t_star, EstimandRequest("taite", set_a=[alloc], n_reps=40, seed=3))
    ite = estimate(p, tess, window, t_star, EstimandRequest("ite", z=alloc, n_reps=40, seed=3))
    assert taite.estimate == aite.estimate
    assert np.array_equal(taite.draws, aite.draws)
    assert aite.estimate == pytest.approx(np.mean(ite.per_cell), abs=1e-12)
    one = estimate(p, tess, window, t_star, EstimandRequest("ite", z=alloc, cell=2, n_reps=40, seed=3))
    assert one.estimate == pytest.approx(ite.per_cell[2], abs=1e-12)


def test_dtaite_is_difference_of_taites():
    p, window, t_star, tess, alloc = design()
    J = tess.n_cells
    a = [alloc, Allocation.all_treated(J)]
    b = [Allocation.all_control(J)]
    d = estimate(p, tess, window, t_star, EstimandRequest("dtaite", set_a=a, set_b=b, n_reps=30, seed=4))
    ta = estimate(p, tess, window, t_star, EstimandRequest("taite", set_a=a, n_reps=30, seed=4))
    tb = estimate(p, tess, window, t_star, EstimandRequest("taite", set_a=b, n_reps=30, seed=4))
    assert np.array_equal(d.draws, ta.draws - tb.draws)


def test_mcse_definition_and_errors():
    p, window, t_star, tess, alloc = design()
    rep = estimate(p, tess, window, t_star, EstimandRequest("daite", z=alloc, z_b=Allocation.all_control(4),
                                                            n_reps=30, seed=0))
    assert rep.mcse == pytest.approx(np.std(rep.draws, ddof=1) / np.sqrt(30))
    with pytest.raises(ValueError, match="n_reps"):
        estimate(p, tess, window, t_star, EstimandRequest("aite", z=alloc, n_reps=1))
    with pytest.raises(ValueError):
        EstimandRequest("daite", z=alloc)
    with pytest.raises(ValueError):
        estimate(p, tess, window, t_star, EstimandRequest("ite", z=alloc, cell=9, n_reps=5))


def test_seed_determinism():
    p, window, t_star, tess, alloc = design()
    req = EstimandRequest("aite", z=alloc, n_reps=20, seed=8)
    a = estimate(p, tess, window, t_star, req)
    b = estimate(p, tess, window, t_star, req)
    assert np.array_equal(a.draws, b.draws)


def test_bootstrap_smoke_and_determinism():
    p, window, t_star, tess, alloc = design()
    req = EstimandRequest("daite", z=alloc, z_b=Allocation.all_control(4), n_reps=5, seed=0)
    a = parametric_bootstrap(p, window, t_star, tess, alloc, 2, req, seed=5, free=["mu0", "mu1"])
    b = parametric_bootstrap(p, window, t_star, tess, alloc, 2, req, seed=5, free=["mu0", "mu1"])
    assert a.n_ok == 2 and a.n_failed == 0 and a.estimates.size == 2
    assert np.array_equal(a.thetas, b.thetas) and np.array_equal(a.estimates, b.estimates)
    assert a.interval is not None
    with pytest.raises(ValueError):
        parametric_bootstrap(p, window, t_star, tess, alloc, 1)


def test_poisson_bootstrap_sd_matches_analytic():
    window = Window.square(0.0, 20.0, 10.0)
    tess = GridTessellation(window.region, 2, 1)
    alloc = Allocation([0, 1])
    p = ModelParams([1.0, 2.0], ExpGaussKernel(np.zeros((2, 2)), 1.0, 1.0))
    res = parametric_bootstrap(p, window, 10.0, tess, alloc, 200, seed=1, free=["mu0", "mu1"])
    # control: whole region before t_star plus its cell after; treated: its cell after
    mass = np.array([100.0 * 10 + 50.0 * 10, 50.0 * 10])
    sd = np.std(res.thetas[:, :2], axis=0, ddof=1)
    assert np.all(np.abs(sd / np.sqrt(p.mu / mass) - 1) < 0.25)


def test_transfer_bound_zero_at_truth():
    p, window, t_star, tess, alloc = design()
    contrasts = [(1.0, alloc, None), (-1.0, Allocation.all_control(4), None)]
    rep = transfer_bound_check(p, p, contrasts, L_hat=1.0, window=window, t_star=t_star, tess=tess,
                               names=["mu0", "K00"], n_reps=20)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.holds


def test_transfer_bound_small_perturbation():
    p, window, t_star, tess, alloc = design()
    names = ["mu0", "mu1", "K00", "K11"]
    contrasts = [(1.0, alloc, [0, 1])]
    L = estimate_lipschitz(p, window, t_star, tess, contrasts, names, n_reps=100, seed=3)
    assert L > 0
    q = p.with_values(K00=p.kernel.K[0, 0] + 0.03, mu0=p.mu[0] - 0.02)
    rep = transfer_bound_check(q, p, contrasts, L_hat=L, window=window, t_star=t_star, tess=tess, names=names,
                               n_reps=100, seed=3)
    assert rep.distance == pytest.approx(np.hypot(0.03, 0.02))
    assert rep.holds


def test_cell_mean_measure_scales_with_horizon():
    cfg = benchmark_setup(seed=0, t_end=50.0)
    z = cfg.allocation
    a = mean_measure(cfg.params, cfg.window, cfg.t_star, cfg.tess, z, cells=[0], n_reps=200, seed=1, horizon=20.0)
    b = mean_measure(cfg.params, cfg.window, cfg.t_star, cfg.tess, z, cells=[0], n_reps=200, seed=1, horizon=40.0)
    assert abs((b / a) / 2.0 - 1) < 0.10
