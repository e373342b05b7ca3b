"""Ready-made configurations used by the simulation study and the tests."""

from __future__ import annotations

import numpy as np

from .model import Allocation, ExpGaussKernel, GridTessellation, ModelParams, Window
from .simulate import SimConfig

__all__ = ["benchmark_params", "benchmark_setup", "BENCHMARK"]

# Study design: mu is the whole-region background rate per unit time and the
# kernel amplitudes are branching ratios (normalised kernels).
BENCHMARK = dict(
    mu=8.0,
    alpha=0.01,
    beta=10.0,
    K_control=0.8,
    K_treated=0.2,
    side=100.0,
    t_star=10.0,
    t_end=110.0,
    grid=10,
    treated_fraction=0.5,
)


def benchmark_params(mu=None, K_control=None, K_treated=None, beta=None, alpha=None, **kw) -> ModelParams:
    """True parameters of the benchmark design (no cross-excitation)."""
    b = BENCHMARK
    kern = ExpGaussKernel.diagonal(
        b["K_control"] if K_control is None else K_control,
        b["K_treated"] if K_treated is None else K_treated,
        b["beta"] if beta is None else beta,
        b["alpha"] if alpha is None else alpha,
        normalized=True,
    )
    m = b["mu"] if mu is None else mu
    return ModelParams(np.broadcast_to(np.asarray(m, dtype=float), (2,)).copy(), kern, mu_units="total", **kw)


def benchmark_setup(seed=0, allocation_seed=None, params=None, t_end=None, side=None, grid=None):
    """``SimConfig`` for the benchmark design.

    The treated half of the grid is drawn once from ``allocation_seed``
    (defaults to ``seed``); replicate streams come from ``seed``.
    """
    b = BENCHMARK
    side = b["side"] if side is None else side
    grid = b["grid"] if grid is None else grid
    window = Window.square(0.0, b["t_end"] if t_end is None else t_end, side)
    tess = GridTessellation(window.region, grid, grid)
    alloc = Allocation.random(tess.n_cells, b["treated_fraction"], seed if allocation_seed is None else allocation_seed)
    params = benchmark_params() if params is None else params
    return SimConfig(params, window, b["t_star"], tess, alloc, seed=seed)
