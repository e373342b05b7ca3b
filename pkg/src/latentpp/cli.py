"""Command-line entry point: ``latentpp <command> --config run.yaml --out DIR``.

Each run writes its artifacts plus ``manifest.json`` (config hash, seed,
package versions, artifact checksums) into ``--out``.  Failures write
``error.json`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time
import traceback
import warnings
from importlib import metadata
from pathlib import Path

from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from .config import COMMANDS, RunConfig, config_hash, load_config
from .diagnostics import band_mass, time_rescaling_test
from .estimands import estimate, parametric_bootstrap
from .fitting import fit_naive, fit_oracle
from .hardem import blockwise_error_accounting, run_hard_em
from .io import dump_json, file_sha256, load_catalog, load_fit, save_catalog, save_fit, write_rows
from .likelihood import loglik_value
from .model import _full_labels
from .sem import run_sem
from .simulate import SimConfig, simulate

log = logging.getLogger("latentpp")

EXIT_ERROR = 1
EXIT_CONFIG = 2

_VERSIONED = ("artifact", "numpy", "scipy", "shapely", "scikit-learn", "pydantic", "PyYAML", "threadpoolctl")


def versions() -> dict:
    out = {"python": platform.python_version()}
    for name in _VERSIONED:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    return out


class Run:
    """Resolved design for one command."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.seed = cfg.seed
        self.window = cfg.window.window()
        self.t_star = cfg.window.t_star
        self.tess = cfg.tessellation.build(self.window.region)
        self.allocation = cfg.allocation.build(self.tess)
        self.template = cfg.model.build()
        self.artifacts = []

    def emit(self, name):
        path = self.out / name
        self.artifacts.append(path)
        return path

    def catalog(self):
        if self.cfg.catalog is None:
            raise ValueError("this command needs 'catalog' (a CSV path) in the config")
        return load_catalog(self.cfg.catalog, self.t_star, self.window)

    def fitted(self):
        """``(params, labels)`` from the ``fit`` file, else the model template and no labels."""
        if self.cfg.fit is None:
            return self.template, None
        d = load_fit(self.cfg.fit)
        return d["params"], d.get("labels")


def _save_fit(run, cat, params, bits, method, extra=None):
    start, upto = run.t_star, cat.window.t_end
    ll = loglik_value(params, cat, _full_labels(cat, bits), run.allocation, run.tess, start, upto)
    extra = dict(extra or {})
    extra["catalog_sha256"] = file_sha256(run.cfg.catalog)
    return save_fit(run.emit("fit.json"), params, bits, ll, start, upto, method, run.seed, extra)


def cmd_simulate(run):
    s = run.cfg.simulate
    sim = SimConfig(run.template, run.window, run.t_star, run.tess, run.allocation, seed=run.seed, method=s.method,
                    warmup=s.warmup, b_value=s.b_value, max_events=s.max_events)
    rows = []
    for r in range(s.n_replicates):
        res = simulate(sim, rep=r)
        name = "catalog.csv" if s.n_replicates == 1 else f"catalog_{r:04d}.csv"
        save_catalog(res.catalog, run.emit(name))
        rows.append({"replicate": r, "seed": run.seed, "file": name, "n_events": res.catalog.n,
                     "n_post": res.catalog.n_post, "n_treated_label": int(res.truth.bits.sum())})
    write_rows(rows, run.emit("simulate_summary.csv"))
    return {"replicates": rows}


def _fit_labelled(run, method):
    cat = run.catalog()
    f = run.cfg.fitting
    fn = fit_naive if method == "naive" else fit_oracle
    res = fn(cat, run.tess, run.allocation, run.template, free=f.free, include_pre=f.include_pre)
    _save_fit(run, cat, res.params, res.labelling.bits, method,
              {"free": res.free, "at_bounds": res.at_bounds, "converged": bool(res.opt.converged)})
    return {"estimates": res.estimates(), "at_bounds": res.at_bounds}


def cmd_fit_naive(run):
    return _fit_labelled(run, "naive")


def cmd_fit_oracle(run):
    return _fit_labelled(run, "oracle")


def cmd_fit_sem(run):
    cat = run.catalog()
    res = run_sem(cat, run.tess, run.allocation, run.template, run.cfg.sem.build(run.seed))
    _save_fit(run, cat, res.params, res.labelling.bits, "sem", {"free": res.free, "converged": res.converged})
    write_rows(list(res.trace.rows()), run.emit("sem_trace.csv"))
    return {"loglik": res.loglik, "converged": res.converged}


def cmd_fit_hardem(run):
    cat = run.catalog()
    truth = cat.truth if cat.has_truth else None
    params, lab, trace = run_hard_em(cat, run.tess, run.allocation, run.template, run.cfg.hardem.build(), truth=truth)
    _save_fit(run, cat, params, lab.bits, "hardem", {"K_win_hat": trace.K_win_hat})
    write_rows(list(trace.rows()), run.emit("hardem_trace.csv"))
    out = {"blocks": len(trace.u)}
    if truth is not None:
        acc = blockwise_error_accounting(trace, truth, cat)
        write_rows(acc, run.emit("hardem_errors.csv"))
        out["max_residual"] = max(abs(r["residual"]) for r in acc)
    return out


def cmd_estimate(run):
    params, _ = run.fitted()
    req = run.cfg.estimand.build(run.allocation, run.seed)
    rep = estimate(params, run.tess, run.window, run.t_star, req)
    d = rep.to_dict()
    d["seed"] = run.seed
    dump_json(d, run.emit("estimand.json"))
    return {"estimate": rep.estimate, "mcse": rep.mcse}


def cmd_bootstrap(run):
    params, _ = run.fitted()
    b = run.cfg.bootstrap
    req = run.cfg.estimand.build(run.allocation, run.seed)
    res = parametric_bootstrap(params, run.window, run.t_star, run.tess, run.allocation, b.B, req=req,
                               pipeline=b.pipeline, seed=run.seed, sem_cfg=run.cfg.sem.build(run.seed),
                               level=b.level, free=run.cfg.fitting.free)
    d = res.to_dict()
    d["seed"] = run.seed
    dump_json(d, run.emit("bootstrap.json"))
    return {"interval": d["interval"], "n_failed": res.n_failed}


def _labels_for(run, cat, labels):
    if labels is not None:
        if labels.size != cat.n_post:
            raise ValueError(f"fit labels cover {labels.size} events, catalog has {cat.n_post} after t_star")
        return labels
    if cat.has_truth:
        return cat.truth
    raise ValueError("labels required: give a 'fit' file with labels or a labelled catalog")


def cmd_gof(run):
    cat = run.catalog()
    params, labels = run.fitted()
    rep = time_rescaling_test(params, cat, _labels_for(run, cat, labels), run.allocation, run.tess)
    d = rep.to_dict()
    d["seed"] = run.seed
    dump_json(d, run.emit("gof.json"))
    return {"ks_statistic": rep.ks_statistic, "p_value": rep.p_value}


def cmd_band(run):
    cat = run.catalog()
    params, labels = run.fitted()
    b = run.cfg.band
    rep = band_mass(params, cat, run.tess, run.allocation, _labels_for(run, cat, labels), b=b.b,
                    raster=(b.raster, b.slabs), check=b.check)
    d = rep.to_dict()
    d["seed"] = run.seed
    dump_json(d, run.emit("band.json"))
    return d


def cmd_study(run):
    from .study import StudyConfig, run_study, summarize

    s = run.cfg.study
    cfg = StudyConfig(n_replicates=s.n_replicates, seed0=run.seed, allocation_seed=run.cfg.allocation.seed,
                      sem=run.cfg.sem.build(0), daite_reps=s.daite_reps, truth_reps=s.truth_reps,
                      control_at_truth=s.control_at_truth, plugin_daite=s.plugin_daite)
    res = run_study(cfg, progress=lambda r: log.info("replicate %d done", r["rep"]))
    write_rows(res["rows"], run.emit("study_rows.csv"))
    summ = summarize(res)
    summ.update(true_daite=res["true_daite"], true_daite_mcse=res["true_daite_mcse"], seed=run.seed)
    dump_json(summ, run.emit("study_summary.json"))
    return summ


HANDLERS = {
    "simulate": cmd_simulate,
    "fit-naive": cmd_fit_naive,
    "fit-oracle": cmd_fit_oracle,
    "fit-sem": cmd_fit_sem,
    "fit-hardem": cmd_fit_hardem,
    "estimate": cmd_estimate,
    "bootstrap": cmd_bootstrap,
    "gof": cmd_gof,
    "band": cmd_band,
    "study": cmd_study,
}


def build_parser():
    p = argparse.ArgumentParser(prog="latentpp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: $PPD_THREADS)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("PPD_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"PPD_THREADS must be an integer, got {env!r}") from None
    return None


def _write_error(out, command, exc, code):
    out.mkdir(parents=True, exist_ok=True)
    dump_json({
        "command": command,
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": code,
        "traceback": traceback.format_exception_only(type(exc), exc),
    }, out / "error.json")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    out = args.out
    try:
        cfg = load_config(args.config, None if args.seed is None else {"seed": args.seed})
    except (ValidationError, ValueError, FileNotFoundError, OSError) as exc:
        log.error("invalid configuration: %s", exc)
        _write_error(out, args.command, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    try:
        n_threads = _threads(args.threads)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(cfg, out)
        t0 = time.perf_counter()
        with threadpool_limits(limits=n_threads), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = HANDLERS[args.command](run)
        elapsed = time.perf_counter() - t0
    except Exception as exc:  # noqa: BLE001 - every failure becomes error.json
        log.error("%s failed: %s", args.command, exc)
        _write_error(out, args.command, exc, EXIT_ERROR)
        return EXIT_ERROR
    manifest = {
        "command": args.command,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "threads": n_threads,
        "versions": versions(),
        "artifacts": {p.name: file_sha256(p) for p in run.artifacts},
        "warnings": sorted({str(w.message) for w in caught}),
        "result": result,
        "elapsed_seconds": round(elapsed, 3),
    }
    dump_json(manifest, out / "manifest.json")
    for w in manifest["warnings"]:
        log.warning(w)
    log.info("%s done in %.1f s; artifacts in %s", args.command, elapsed, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
