"""Latent-label superposed point processes under cell-level treatment allocations.

Simulation, exact likelihoods, stochastic EM, blockwise penalised hard-EM,
plug-in causal estimands and diagnostics for control/treatment Poisson,
Hawkes and ETAS processes observed without component labels.
"""

from .diagnostics import band_curve, band_mass, time_rescaling_test, window_envelope
from .estimands import (
    EstimandReport,
    EstimandRequest,
    estimate,
    estimate_lipschitz,
    mean_measure,
    parametric_bootstrap,
    transfer_bound_check,
)
from .estimators import HardEmEstimator, NaiveEstimator, OracleEstimator, SemEstimator
from .fitting import fit_labelled, fit_naive, fit_oracle, fit_pre_control
from .hardem import HardEmConfig, Schedule, blockwise_error_accounting, run_hard_em
from .io import load_catalog, load_fit, load_tessellation, save_catalog, save_fit
from .kde import estimate_background_kde
from .likelihood import (
    Labelling,
    compensator,
    complete_data_loglik,
    loglik_gradient,
    observed_loglik_enumerate,
    observed_loglik_poisson,
    per_flip_delta,
)
from .model import (
    Allocation,
    BackgroundField,
    EtasKernel,
    EventCatalog,
    ExpGaussKernel,
    GridTessellation,
    ModelParams,
    PolygonTessellation,
    SpaceTimePoint,
    Window,
    evaluate_intensity,
    oracle_score,
)
from .optimize import OptConfig, maximize
from .presets import benchmark_params, benchmark_setup
from .sem import DiscrepancyProposalConfig, SemConfig, run_sem
from .simulate import SimConfig, simulate, simulate_counterfactual

__version__ = "0.1.0"

__all__ = [
    "Allocation", "BackgroundField", "DiscrepancyProposalConfig", "EstimandReport", "EstimandRequest",
    "EtasKernel", "EventCatalog", "ExpGaussKernel", "GridTessellation", "HardEmConfig", "HardEmEstimator",
    "Labelling", "ModelParams", "NaiveEstimator", "OptConfig", "OracleEstimator", "PolygonTessellation",
    "Schedule", "SemConfig", "SemEstimator", "SimConfig", "SpaceTimePoint", "Window",
    "band_curve", "band_mass", "benchmark_params", "benchmark_setup", "blockwise_error_accounting",
    "compensator", "complete_data_loglik", "estimate", "estimate_background_kde", "estimate_lipschitz",
    "evaluate_intensity", "fit_labelled", "fit_naive", "fit_oracle", "fit_pre_control", "load_catalog",
    "load_fit", "load_tessellation", "loglik_gradient", "maximize", "mean_measure", "observed_loglik_enumerate",
    "observed_loglik_poisson", "oracle_score", "parametric_bootstrap", "per_flip_delta", "run_hard_em",
    "run_sem", "save_catalog", "save_fit", "simulate", "simulate_counterfactual", "time_rescaling_test",
    "transfer_bound_check", "window_envelope",
]
