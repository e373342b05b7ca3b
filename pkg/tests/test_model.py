import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from latentpp.kde import estimate_background_kde
from latentpp.model import (
    Allocation,
    Decision,
    EtasKernel,
    EventCatalog,
    ExpGaussKernel,
    GridTessellation,
    MarginViolation,
    ModelParams,
    PolygonTessellation,
    SpaceTimePoint,
    Window,
    classify_decisive,
    evaluate_intensity,
    intensities_at,
    oracle_score,
)

from conftest import random_instance

W = Window.square(0.0, 110.0, 100.0)
TESS = GridTessellation(W.region, 10, 10)


def raw_params(mu=8.0, K=0.8, beta=10.0, alpha=0.01, K_t=0.0):
    kern = ExpGaussKernel(np.diag([K, K_t]), beta, alpha)
    return ModelParams([mu, mu], kern)


def history(points, t_star=10.0, window=W):
    return EventCatalog([p[0] for p in points], [p[1] for p in points], [p[2] for p in points], t_star, window,
                        label=[p[3] for p in points])


# ---------------------------------------------------------------------------
# evaluate_intensity / oracle_score
# ---------------------------------------------------------------------------


def test_empty_history_gives_background():
    cat = history([])
    alloc = Allocation.all_control(100)
    lam = evaluate_intensity(raw_params(), cat, None, SpaceTimePoint(50.0, 55.0, 55.0), alloc, TESS, component=0,
                             coverage="ignore")
    assert lam == pytest.approx(8.0, abs=1e-12)


def test_poisson_limit_ignores_history():
    cat = history([(20.0, 50.0, 50.0, 0), (20.5, 51.0, 50.0, 0)])
    alloc = Allocation.all_control(100)
    p = raw_params(K=0.0)
    lam = evaluate_intensity(p, cat, [0, 0], SpaceTimePoint(20.6, 50.0, 50.0), alloc, TESS, component=0,
                             coverage="ignore")
    assert lam == pytest.approx(8.0, abs=1e-12)


def test_single_parent_kernel_value():
    cat = history([(20.0, 50.0, 50.0, 0)])
    lam = evaluate_intensity(raw_params(), cat, [0], SpaceTimePoint(20.1, 50.0, 50.0), Allocation.all_control(100),
                             TESS, component=0, coverage="ignore")
    assert lam == pytest.approx(8 + 0.8 * math.exp(-1), abs=1e-12)
    assert lam == pytest.approx(8.29430, abs=1e-5)


def test_oracle_score_examples():
    alloc = Allocation(np.zeros(100))
    p = raw_params().with_values(K11=0.8)
    ungated = ModelParams(p.mu, p.kernel, gating="none")
    cat = history([])
    assert oracle_score(ungated, cat, None, SpaceTimePoint(50.0, 5.0, 5.0), alloc, TESS) == pytest.approx(0.0)
    e = ModelParams([1.0, math.e], p.kernel, gating="none")
    assert oracle_score(e, cat, None, SpaceTimePoint(50.0, 5.0, 5.0), alloc, TESS) == pytest.approx(1.0, abs=1e-12)
    one = history([(20.0, 50.0, 50.0, 0)])
    s = oracle_score(ModelParams([8.0, 8.0], raw_params().kernel, gating="none"), one, [0],
                     SpaceTimePoint(20.1, 50.0, 50.0), alloc, TESS)
    assert s == pytest.approx(math.log(8 / (8 + 0.8 * math.exp(-1))), abs=1e-12)
    assert s == pytest.approx(-0.03613, abs=1e-5)


def test_oracle_score_margin_violation_and_floor():
    cat = history([])
    alloc = Allocation.all_control(100)
    pt = SpaceTimePoint(50.0, 5.0, 5.0)
    with pytest.raises(MarginViolation):
        oracle_score(raw_params(), cat, None, pt, alloc, TESS)
    assert np.isfinite(oracle_score(raw_params(), cat, None, pt, alloc, TESS, floor=1e-8))


def test_unlabelled_history_is_an_error():
    cat = history([(20.0, 50.0, 50.0, -1)])
    with pytest.raises(ValueError, match="labels required"):
        evaluate_intensity(raw_params(), cat, None, SpaceTimePoint(21.0, 50.0, 50.0), Allocation.all_control(100),
                           TESS, coverage="ignore")


def test_short_history_coverage_warns_or_errors():
    cat = history([])
    pt = SpaceTimePoint(0.1, 50.0, 50.0)
    with pytest.warns(UserWarning):
        evaluate_intensity(raw_params(), cat, None, pt, Allocation.all_control(100), TESS)
    with pytest.raises(ValueError):
        evaluate_intensity(raw_params(), cat, None, pt, Allocation.all_control(100), TESS, coverage="error")


def test_intensity_dominates_gated_background_and_is_additive():
    rng = np.random.default_rng(0)
    for seed in range(10):
        params, cat, bits, tess, alloc = random_instance(seed)
        labels = np.asarray(cat.label).copy()
        labels[cat.n_pre:] = bits
        t = rng.uniform(cat.window.t_start, cat.window.t_end, 1000)
        x = rng.uniform(0, 20, 1000)
        y = rng.uniform(0, 20, 1000)
        lam = intensities_at(params, cat, labels, tess, alloc, t, x, y)
        zero = params.with_values(**{n: 0.0 for n in params.kernel.amplitude_names()})
        base = intensities_at(zero, cat, labels, tess, alloc, t, x, y)
        assert np.all(lam >= base - 1e-15)
        for i in range(0, 1000, 97):
            pair = evaluate_intensity(params, cat, bits, SpaceTimePoint(t[i], x[i], y[i]), alloc, tess,
                                      coverage="ignore")
            both = [evaluate_intensity(params, cat, bits, SpaceTimePoint(t[i], x[i], y[i]), alloc, tess, k,
                                       coverage="ignore") for k in (0, 1)]
            assert pair[0] + pair[1] == pytest.approx(sum(both), rel=1e-15, abs=0)


def test_predictability_excludes_own_event():
    cat = history([(20.0, 50.0, 50.0, 0)])
    lam = evaluate_intensity(raw_params(), cat, [0], SpaceTimePoint(20.0, 50.0, 50.0), Allocation.all_control(100),
                             TESS, component=0, coverage="ignore")
    assert lam == pytest.approx(8.0)


# ---------------------------------------------------------------------------
# classify_decisive
# ---------------------------------------------------------------------------


def test_classify_examples():
    assert classify_decisive(0.5, 0.2) is Decision.PLUS
    assert classify_decisive(-0.2, 0.2) is Decision.MINUS
    assert classify_decisive(0.1, 0.2) is Decision.AMBIGUOUS
    with pytest.raises(ValueError):
        classify_decisive(0.1, 0.0)


@given(st.floats(-50, 50, allow_nan=False), st.floats(1e-6, 50))
def test_classify_matches_inequalities(s, b):
    d = classify_decisive(s, b)
    assert (d is Decision.PLUS) == (s >= b)
    assert (d is Decision.MINUS) == (s <= -b)
    assert (d is Decision.AMBIGUOUS) == (-b < s < b)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def test_expgauss_branching_matrix_matches_quadrature():
    k = ExpGaussKernel(np.array([[0.3, 0.1], [0.05, 0.2]]), np.array([[2.0, 1.0], [1.5, 3.0]]),
                       np.array([[0.2, 0.1], [0.3, 0.5]]))
    B = k.branching_matrix(truncated=True)
    for i in range(2):
        for j in range(2):
            tq = integrate.quad(lambda s: math.exp(-k.beta[i, j] * s), 0, k.h, epsabs=0, epsrel=1e-13)[0]
            sq = integrate.quad(lambda s: math.exp(-k.alpha[i, j] * s * s), -k.R, k.R, epsabs=0, epsrel=1e-13)[0]
            assert B[i, j] == pytest.approx(k.K[i, j] * tq * sq * sq, rel=1e-6)


def test_normalized_kernel_mass_near_branching_ratio():
    k = ExpGaussKernel.diagonal(0.8, 0.2, 10.0, 0.01, normalized=True)
    B = k.branching_matrix(truncated=True)
    assert np.allclose(np.diag(B), [0.8, 0.2], rtol=0.01)
    raw = ExpGaussKernel.diagonal(0.8, 0.2, 10.0, 0.01)
    assert raw.branching_matrix(truncated=False)[0, 0] == pytest.approx(0.8 / 10 * math.pi / 0.01)


def test_etas_omori_normalisation():
    for c, p in [(0.01, 1.1), (0.1, 1.5), (1.0, 2.3)]:
        k = EtasKernel(np.full((2, 2), 0.1), np.ones((2, 2)), c, p, 1.0, 0.5, 1.5)
        total = integrate.quad(k.omori, 0, k.t_trunc, limit=500, epsabs=0, epsrel=1e-12, points=[c, 10 * c])[0]
        assert total == pytest.approx(1.0, abs=1e-8)
        assert k.omori_integral(0.0, k.t_trunc) == pytest.approx(1.0, abs=1e-12)


def test_etas_mass_increases_with_magnitude():
    k = EtasKernel(np.full((2, 2), 0.1), np.full((2, 2), 1.2), 0.05, 1.2, 2.0, 0.5, 1.8)
    mags = np.linspace(0.0, 4.0, 9)
    prod = k.productivity(mags, 0, 0)
    assert np.all(np.diff(prod) > 0)
    masses = k.masses(np.zeros(9), np.full(9, 50.0), np.full(9, 50.0), mags, 0, np.zeros(9, dtype=int),
                      np.zeros(9), np.full(9, k.t_trunc), (0.0, 100.0, 0.0, 100.0))
    assert np.all(np.diff(masses) > 0)


def test_params_vector_round_trip():
    for seed in range(5):
        params = random_instance(seed)[0]
        v = params.vector()
        assert v.size == params.dim == len(params.names())
        again = params.with_vector(v)
        assert np.array_equal(again.vector(), v)
        assert np.array_equal(ModelParams.from_dict(params.to_dict()).vector(), v)


# ---------------------------------------------------------------------------
# Tessellations and allocations
# ---------------------------------------------------------------------------


def test_grid_tessellation():
    assert TESS.n_cells == 100
    assert np.allclose(TESS.areas, 100.0)
    one = GridTessellation(W.region, 1, 1)
    assert one.n_cells == 1 and one.area == pytest.approx(W.area)
    assert np.all(one.cell_index(np.array([0.0, 100.0, 50.0]), np.array([0.0, 100.0, 3.0])) == 0)


def test_polygon_tessellation_checks():
    region = (0.0, 2.0, 0.0, 1.0)
    left = [(0, 0), (1, 0), (1, 1), (0, 1)]
    right = [(1, 0), (2, 0), (2, 1), (1, 1)]
    tess = PolygonTessellation(region, [left, right])
    assert tess.n_cells == 2
    assert list(tess.cell_index(np.array([0.5, 1.5]), np.array([0.5, 0.5]))) == [0, 1]
    with pytest.raises(ValueError, match="overlap"):
        PolygonTessellation(region, [left, [(0.5, 0), (2, 0), (2, 1), (0.5, 1)]])
    with pytest.raises(ValueError):
        PolygonTessellation(region, [left, [(1, 0), (1.9, 0), (1.9, 1), (1, 1)]])


def test_allocation_helpers():
    z = Allocation.random(100, 0.5, seed=3)
    assert z.z.sum() == 50
    assert Allocation.observed(TESS, [1, 5]).z.sum() == 2
    assert z.with_cell(0, 1).z[0] == 1
    with pytest.raises(ValueError):
        Allocation([0, 2])
    with pytest.raises(ValueError):
        Allocation.all_control(5).check(TESS)


def test_catalog_sorting_and_pre_labels():
    cat = EventCatalog([30.0, 5.0, 20.0], [1.0, 2.0, 3.0], [1.0, 1.0, 1.0], 10.0, W, label=[1, 1, -1])
    assert np.all(np.diff(cat.t) > 0)
    assert cat.n_pre == 1 and cat.label[0] == 0
    with pytest.raises(ValueError, match="outside"):
        EventCatalog([5.0], [200.0], [1.0], 10.0, W)


# ---------------------------------------------------------------------------
# Kernel-smoothed background
# ---------------------------------------------------------------------------


def test_kde_single_point_is_gaussian_bump():
    with pytest.warns(RuntimeWarning):
        f = estimate_background_kde([(30.0, 60.0)], (0.0, 100.0, 0.0, 100.0), bandwidth=5.0, edge=False)
    X, Y = f.pixel_centers()
    bump = np.exp(-((X - 30.0) ** 2 + (Y - 60.0) ** 2) / 50.0)
    w = f.weights[0]
    mask = bump > 1e-10
    ratio = w[mask] / bump[mask]
    assert np.allclose(ratio, ratio[0], rtol=1e-8)


def test_kde_uniform_points_flat():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 100, size=(10_000, 2))
    f = estimate_background_kde(pts, (0.0, 100.0, 0.0, 100.0), bandwidth=30.0)
    assert f.weights[0].max() / f.weights[0].min() < 1.2


def test_kde_two_clusters_split_mass():
    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal([20, 20], 2.0, size=(500, 2)), rng.normal([80, 80], 2.0, size=(500, 2))])
    f = estimate_background_kde(pts, (0.0, 100.0, 0.0, 100.0), bandwidth=3.0)
    X, _ = f.pixel_centers()
    left = f.weights[0][X < 50].sum() / f.weights[0].sum()
    assert abs(left - 0.5) < 0.05 * 0.5


def test_kde_cell_normalisation_exact():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 100, size=(200, 2))
    f = estimate_background_kde(pts, W.region, tess=TESS)
    assert np.allclose(f.cell_masses(TESS), TESS.areas[None, :], rtol=1e-10)
