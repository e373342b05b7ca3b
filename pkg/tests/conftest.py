import warnings

import numpy as np
import pytest

from latentpp.model import Allocation, ExpGaussKernel, GridTessellation, ModelParams, Window
from latentpp.presets import benchmark_setup
from latentpp.simulate import SimConfig, simulate


def small_design(t_end=30.0, side=20.0, grid=2, t_star=5.0, seed=0):
    window = Window.square(0.0, t_end, side)
    tess = GridTessellation(window.region, grid, grid)
    alloc = Allocation.random(tess.n_cells, 0.5, seed)
    return window, t_star, tess, alloc


def random_hawkes(rng, cross=True, normalized=None):
    """Random subcritical exponential-Gaussian model on a small window."""
    K = rng.uniform(0.05, 0.35, size=(2, 2))
    if not cross:
        K = np.diag(np.diag(K))
    beta = rng.uniform(0.5, 3.0, size=(2, 2))
    alpha = rng.uniform(0.05, 0.5, size=(2, 2))
    normalized = bool(rng.integers(2)) if normalized is None else normalized
    if not normalized:
        K = K * beta * alpha / np.pi
    kern = ExpGaussKernel(K, beta, alpha, normalized=normalized)
    mu = rng.uniform(0.5, 2.0, size=2)
    return ModelParams(mu, kern, mu_units="total")


def random_instance(seed, t_end=30.0, cross=True, normalized=None):
    """Simulated catalog with random labels from a random Hawkes model."""
    rng = np.random.default_rng(seed)
    window, t_star, tess, alloc = small_design(t_end=t_end, seed=seed)
    params = random_hawkes(rng, cross=cross, normalized=normalized)
    params = params.with_values(mu0=params.mu[0] * 3, mu1=params.mu[1] * 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cat = simulate(SimConfig(params, window, t_star, tess, alloc, seed=seed)).catalog
    bits = rng.integers(0, 2, size=cat.n_post).astype(np.int8)
    return params, cat, bits, tess, alloc


@pytest.fixture(scope="session")
def benchmark():
    """Benchmark design and one simulated replicate."""
    cfg = benchmark_setup(seed=3, allocation_seed=0)
    return cfg, simulate(cfg).catalog


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
