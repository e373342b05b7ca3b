"""Replicated simulation study on the benchmark design.

Each replicate simulates one catalog at the true parameters, fits it with
oracle labels, naive cell-status labels and SEM, and evaluates the
observed-regime versus no-treatment DAITE (per unit time) at each fit.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimands import EstimandRequest, estimate
from .fitting import fit_naive, fit_oracle
from .model import Allocation
from .presets import benchmark_params, benchmark_setup
from .sem import SemConfig, run_sem
from .simulate import simulate

__all__ = ["StudyConfig", "daite_request", "true_daite", "run_replicate", "run_study", "summarize"]


@dataclass
class StudyConfig:
    n_replicates: int = 50
    seed0: int = 0
    allocation_seed: int = 0
    sem: SemConfig = field(default_factory=SemConfig)
    daite_reps: int = 200
    truth_reps: int = 2000
    control_at_truth: bool = True
    plugin_daite: bool = False
    methods: tuple = ("oracle", "naive", "sem")


def daite_request(alloc: Allocation, n_reps, seed=0) -> EstimandRequest:
    """Observed regime against no treatment anywhere, per unit time."""
    return EstimandRequest("daite", z=alloc, z_b=Allocation.all_control(alloc.z.size), n_reps=n_reps, seed=seed,
                           per_unit_time=True)


def _with_true_control(theta, truth):
    """Replace the control-only coordinates of ``theta`` by their true values."""
    names = ["mu0"] + truth.kernel.control_only_names()
    return theta.with_values(**{n: float(truth.vector()[truth.index([n])[0]]) for n in names})


def true_daite(n_reps=2000, seed=10**6, allocation_seed=0):
    cfg = benchmark_setup(seed=0, allocation_seed=allocation_seed)
    rep = estimate(cfg.params, cfg.tess, cfg.window, cfg.t_star, daite_request(cfg.allocation, n_reps, seed))
    return rep.estimate, rep.mcse


def run_replicate(rep, cfg: StudyConfig) -> dict:
    setup = benchmark_setup(seed=cfg.seed0 + rep, allocation_seed=cfg.allocation_seed)
    cat = simulate(setup).catalog
    truth = setup.params
    init = benchmark_params()
    out = {"rep": rep, "n_events": cat.n, "n_pre": cat.n_pre}
    fits = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for m in cfg.methods:
            t0 = time.perf_counter()
            if m == "oracle":
                fits[m] = fit_oracle(cat, setup.tess, setup.allocation, init).params
            elif m == "naive":
                fits[m] = fit_naive(cat, setup.tess, setup.allocation, init).params
            else:
                sem_cfg = SemConfig(**{**cfg.sem.__dict__, "seed": cfg.seed0 + rep})
                res = run_sem(cat, setup.tess, setup.allocation, init, sem_cfg)
                fits[m] = res.params
                out["sem_hamming"] = float(np.mean(res.labelling.bits != cat.truth))
            out[f"{m}_seconds"] = time.perf_counter() - t0
    req = daite_request(setup.allocation, cfg.daite_reps, seed=7 + rep)
    for m, p in fits.items():
        for n, v in zip(p.names(), p.vector()):
            out[f"{m}_{n}"] = float(v)
        q = _with_true_control(p, truth) if cfg.control_at_truth else p
        out[f"{m}_daite"] = estimate(q, setup.tess, setup.window, setup.t_star, req).estimate
        if cfg.control_at_truth and cfg.plugin_daite:
            out[f"{m}_daite_plugin"] = estimate(p, setup.tess, setup.window, setup.t_star, req).estimate
    return out


def run_study(cfg: Optional[StudyConfig] = None, progress=None) -> dict:
    cfg = StudyConfig() if cfg is None else cfg
    truth, truth_se = true_daite(cfg.truth_reps, allocation_seed=cfg.allocation_seed)
    rows = []
    for r in range(cfg.n_replicates):
        rows.append(run_replicate(r, cfg))
        if progress is not None:
            progress(rows[-1])
    return {"true_daite": truth, "true_daite_mcse": truth_se, "rows": rows}


def summarize(result) -> dict:
    rows = result["rows"]
    t = result["true_daite"]
    out = {}
    for m in ("oracle", "naive", "sem"):
        if f"{m}_K00" not in rows[0]:
            continue
        for n in ("mu0", "K00", "beta00", "mu1", "K11", "daite"):
            out[f"{m}_{n}_mean"] = float(np.mean([r[f"{m}_{n}"] for r in rows]))
    if "sem_K00" in rows[0] and "naive_K00" in rows[0]:
        out["sem_beats_naive_Kc"] = float(np.mean([abs(r["sem_K00"] - 0.8) < abs(r["naive_K00"] - 0.8) for r in rows]))
        out["sem_beats_naive_daite"] = float(np.mean([abs(r["sem_daite"] - t) < abs(r["naive_daite"] - t)
                                                      for r in rows]))
    return out
