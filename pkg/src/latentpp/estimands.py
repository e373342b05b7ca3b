"""Plug-in causal estimands from fitted parameters.

Every estimand is a contrast of interventional mean measures
``Lambda_theta^z(B)`` evaluated by Monte Carlo.  The regimes of a contrast
share common random numbers: replicate ``r`` of every allocation uses the
stream ``(seed, r)``, so linear combinations of estimands computed from one
:class:`CounterfactualCache` hold exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Allocation
from .simulate import SimConfig, simulate, simulate_counterfactual

__all__ = [
    "EstimandRequest",
    "EstimandReport",
    "CounterfactualCache",
    "estimate",
    "BootstrapResult",
    "parametric_bootstrap",
    "TransferReport",
    "transfer_bound_check",
    "mean_measure",
]

log = logging.getLogger(__name__)

KINDS = ("ite", "aite", "daite", "taite", "dtaite")


def _alloc(z):
    if z is None or isinstance(z, Allocation):
        return z
    return Allocation(np.asarray(z))


@dataclass
class EstimandRequest:
    """What to estimate.

    Parameters
    ----------
    kind : {"ite", "aite", "daite", "taite", "dtaite"}
    z : Allocation
        Reference allocation for ITE/AITE, ``z_a`` for DAITE.
    z_b : Allocation
        Second allocation of a DAITE.
    cell : int, optional
        ITE cell; ``None`` reports every cell.
    set_a, set_b : sequence of Allocation
        Allocation sets of TAITE (``set_a``) and DTAITE.
    horizon : float, optional
        Post-``t_star`` horizon; defaults to ``T - t_star``.
    n_reps : int
        Monte Carlo replicates per regime.
    per_unit_time : bool
        Divide the contrast by the horizon.
    """

    kind: str
    z: Optional[Allocation] = None
    z_b: Optional[Allocation] = None
    cell: Optional[int] = None
    set_a: Optional[Sequence] = None
    set_b: Optional[Sequence] = None
    horizon: Optional[float] = None
    n_reps: int = 200
    seed: int = 0
    per_unit_time: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self.z = _alloc(self.z)
        self.z_b = _alloc(self.z_b)
        if self.set_a is not None:
            self.set_a = [_alloc(z) for z in self.set_a]
        if self.set_b is not None:
            self.set_b = [_alloc(z) for z in self.set_b]
        need = {
            "ite": ("z",),
            "aite": ("z",),
            "daite": ("z", "z_b"),
            "taite": ("set_a",),
            "dtaite": ("set_a", "set_b"),
        }[self.kind]
        for n in need:
            v = getattr(self, n)
            if v is None or (isinstance(v, list) and len(v) == 0):
                raise ValueError(f"{self.kind} needs {n}")
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")

    def allocations(self):
        out = [a for a in (self.z, self.z_b) if a is not None]
        for s in (self.set_a, self.set_b):
            if s:
                out += list(s)
        return out


@dataclass
class EstimandReport:
    kind: str
    estimate: float
    mcse: float
    n_reps: int
    horizon: float
    per_unit_time: bool
    draws: np.ndarray
    per_cell: Optional[np.ndarray] = None
    per_cell_mcse: Optional[np.ndarray] = None
    interval: Optional[tuple] = None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "estimate": float(self.estimate),
            "mcse": float(self.mcse),
            "n_reps": int(self.n_reps),
            "horizon": float(self.horizon),
            "per_unit_time": bool(self.per_unit_time),
        }
        if self.per_cell is not None:
            d["per_cell"] = [float(v) for v in self.per_cell]
            d["per_cell_mcse"] = [float(v) for v in self.per_cell_mcse]
        if self.interval is not None:
            d["interval"] = [float(v) for v in self.interval]
        return d


class CounterfactualCache:
    """Memoised counterfactual draws for one parameter value and seed."""

    def __init__(self, params, window, t_star, tess, n_reps, seed, horizon=None, method="branching"):
        self.params = params
        self.window = window
        self.t_star = t_star
        self.tess = tess
        self.n_reps = int(n_reps)
        self.seed = seed
        self.horizon = window.t_end - t_star if horizon is None else float(horizon)
        self.method = method
        self._draws = {}

    def __call__(self, z):
        z = _alloc(z)
        z.check(self.tess)
        key = z.z.tobytes()
        if key not in self._draws:
            self._draws[key] = simulate_counterfactual(
                self.params, self.window, self.t_star, self.tess, z, self.n_reps, self.seed,
                horizon=self.horizon, method=self.method,
            )
        return self._draws[key]


def _ite_draws(cache, z, cells):
    """Replicate contrasts ``N^{z^{j=1}}(I_j) - N^{z^{j=0}}(I_j)``, shape (n_reps, len(cells))."""
    out = np.empty((cache.n_reps, len(cells)))
    for c, j in enumerate(cells):
        hi = cache(z.with_cell(j, 1)).per_cell[:, j]
        lo = cache(z.with_cell(j, 0)).per_cell[:, j]
        out[:, c] = hi - lo
    return out


def _aite_draws(cache, z):
    return _ite_draws(cache, z, range(cache.tess.n_cells)).mean(axis=1)


def _taite_draws(cache, zs):
    return np.mean([_aite_draws(cache, z) for z in zs], axis=0)


def _mcse(d):
    return float(np.std(d, ddof=1) / np.sqrt(d.shape[0]))


def estimate(params, tess, window, t_star, req: EstimandRequest, cache: Optional[CounterfactualCache] = None,
             method="branching") -> EstimandReport:
    """Monte Carlo plug-in estimate of the requested estimand at ``params``."""
    if req.n_reps < 2:
        raise ValueError("n_reps < 2: the Monte Carlo standard error needs at least two replicates")
    horizon = window.t_end - t_star if req.horizon is None else float(req.horizon)
    if not 0 < horizon <= window.t_end - t_star + 1e-12:
        raise ValueError("horizon must lie in (0, T - t_star]")
    for z in req.allocations():
        z.check(tess)
    if req.kind == "ite" and req.cell is not None and not 0 <= req.cell < tess.n_cells:
        raise ValueError(f"cell {req.cell} out of range for {tess.n_cells} cells")
    if cache is None:
        cache = CounterfactualCache(params, window, t_star, tess, req.n_reps, req.seed, horizon, method)
    elif cache.n_reps != req.n_reps or cache.horizon != horizon or cache.seed != req.seed:
        raise ValueError("cache does not match the request's n_reps, horizon and seed")
    scale = 1.0 / horizon if req.per_unit_time else 1.0
    per_cell = per_cell_se = None
    if req.kind == "ite":
        cells = list(range(tess.n_cells)) if req.cell is None else [req.cell]
        d = _ite_draws(cache, req.z, cells) * scale
        per_cell = d.mean(axis=0)
        per_cell_se = np.std(d, axis=0, ddof=1) / np.sqrt(d.shape[0])
        draws = d[:, 0] if req.cell is not None else d.mean(axis=1)
    elif req.kind == "aite":
        d = _ite_draws(cache, req.z, range(tess.n_cells)) * scale
        per_cell = d.mean(axis=0)
        per_cell_se = np.std(d, axis=0, ddof=1) / np.sqrt(d.shape[0])
        draws = d.mean(axis=1)
    elif req.kind == "daite":
        draws = (cache(req.z).total - cache(req.z_b).total) * scale
    elif req.kind == "taite":
        draws = _taite_draws(cache, req.set_a) * scale
    else:
        draws = (_taite_draws(cache, req.set_a) - _taite_draws(cache, req.set_b)) * scale
    draws = np.asarray(draws, dtype=float)
    return EstimandReport(req.kind, float(draws.mean()), _mcse(draws), req.n_reps, horizon, req.per_unit_time,
                          draws, per_cell, per_cell_se)


# ---------------------------------------------------------------------------
# Parametric bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    estimates: np.ndarray
    thetas: np.ndarray
    names: list
    n_failed: int
    failures: list = field(default_factory=list)
    interval: Optional[tuple] = None
    level: float = 0.95

    @property
    def n_ok(self):
        return int(self.thetas.shape[0])

    def to_dict(self) -> dict:
        return {
            "n_ok": self.n_ok,
            "n_failed": int(self.n_failed),
            "failures": list(self.failures),
            "names": list(self.names),
            "thetas": self.thetas.tolist(),
            "estimates": [float(v) for v in self.estimates],
            "interval": None if self.interval is None else [float(v) for v in self.interval],
            "level": self.level,
        }


def _refit(pipeline, catalog, tess, allocation, init, sem_cfg, free=None):
    from .fitting import fit_naive, fit_oracle
    from .sem import run_sem

    if pipeline == "naive":
        return fit_naive(catalog, tess, allocation, init, free=free).params
    if pipeline == "oracle":
        return fit_oracle(catalog, tess, allocation, init, free=free).params
    if pipeline == "sem":
        return run_sem(catalog, tess, allocation, init, sem_cfg).params
    raise ValueError("pipeline must be 'naive', 'sem' or 'oracle'")


def parametric_bootstrap(params, window, t_star, tess, allocation, B, req: Optional[EstimandRequest] = None,
                         pipeline="naive", seed=0, sem_cfg=None, level=0.95, method="branching",
                         free=None) -> BootstrapResult:
    """Simulate ``B`` catalogs from ``params``, refit each and evaluate ``req``.

    Replicate ``b`` uses the simulation stream ``(seed, b)``.  Refits that
    raise are recorded and excluded.  ``free`` restricts the naive and
    oracle refits to the named coordinates (the SEM pipeline takes them
    from ``sem_cfg``).
    """
    import warnings

    if B < 2:
        raise ValueError("B must be at least 2")
    if pipeline not in ("naive", "sem", "oracle"):
        raise ValueError("pipeline must be 'naive', 'sem' or 'oracle'")
    cfg = SimConfig(params, window, t_star, tess, allocation, seed=seed, method=method)
    thetas, ests, failures = [], [], []
    for b in range(B):
        try:
            cat = simulate(cfg, rep=b).catalog
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = _refit(pipeline, cat, tess, allocation, params, sem_cfg, free)
            if req is not None:
                ests.append(estimate(fit, tess, window, t_star, req).estimate)
            thetas.append(fit.vector())
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            failures.append(f"replicate {b}: {exc}")
            log.warning("bootstrap replicate %d failed: %s", b, exc)
    thetas = np.array(thetas) if thetas else np.zeros((0, params.dim))
    ests = np.asarray(ests, dtype=float)
    interval = None
    if ests.size >= 2:
        a = (1 - level) / 2
        interval = (float(np.quantile(ests, a)), float(np.quantile(ests, 1 - a)))
    return BootstrapResult(ests, thetas, params.names(), len(failures), failures, interval, level)


# ---------------------------------------------------------------------------
# Transfer bound
# ---------------------------------------------------------------------------


def mean_measure(params, window, t_star, tess, z, cells=None, n_reps=400, seed=0, horizon=None, method="branching"):
    """Monte Carlo ``Lambda_theta^z(B)`` with ``B = (t_star, t_star + horizon] x cells``."""
    d = simulate_counterfactual(params, window, t_star, tess, _alloc(z), n_reps, seed, horizon=horizon, method=method)
    counts = d.total if cells is None else d.per_cell[:, list(cells)].sum(axis=1)
    return float(counts.mean())


@dataclass
class TransferReport:
    lhs: float
    rhs: float
    L_hat: float
    distance: float
    volume: float
    holds: bool
    safety: float

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in self.__dict__.items()}


def _contrast(params, window, t_star, tess, contrasts, n_reps, seed, horizon, method):
    return sum(
        c * mean_measure(params, window, t_star, tess, z, cells, n_reps, seed, horizon, method)
        for c, z, cells in contrasts
    )


def _volume(window, t_star, tess, contrasts, horizon):
    h = window.t_end - t_star if horizon is None else horizon
    tot = 0.0
    for c, _, cells in contrasts:
        area = tess.area if cells is None else float(np.sum(tess.areas[list(cells)]))
        tot += abs(c) * area * h
    return tot


def estimate_lipschitz(params, window, t_star, tess, contrasts, names, step=0.05, n_reps=400, seed=0,
                       horizon=None, method="branching"):
    """Finite-difference Lipschitz constant of the mean intensity in ``theta``.

    The largest, over contrast terms, Euclidean norm of the central
    difference gradient of ``Lambda_theta^z(B) / |B|`` in the ``names``
    coordinates.  Steps are relative (``step`` times the coordinate
    magnitude).
    """
    idx = params.index(names)
    v0 = params.vector()
    h = window.t_end - t_star if horizon is None else horizon
    best = 0.0
    for _, z, cells in contrasts:
        area = tess.area if cells is None else float(np.sum(tess.areas[list(cells)]))
        g = np.zeros(len(idx))
        for c, i in enumerate(idx):
            e = step * max(abs(v0[i]), 1e-3)
            vp, vm = v0.copy(), v0.copy()
            vp[i] += e
            vm[i] -= e
            fp = mean_measure(params.with_vector(vp), window, t_star, tess, z, cells, n_reps, seed, horizon, method)
            fm = mean_measure(params.with_vector(vm), window, t_star, tess, z, cells, n_reps, seed, horizon, method)
            g[c] = (fp - fm) / (2 * e)
        best = max(best, float(np.linalg.norm(g)) / (area * h))
    return best


def transfer_bound_check(theta_hat, theta_star, contrasts, L_hat=None, window=None, t_star=None, tess=None,
                         names=None, safety=2.0, n_reps=400, seed=0, horizon=None, method="branching"):
    """Check ``|F(theta_hat) - F(theta_star)| <= safety * L * sum|c| |B| * ||theta_hat - theta_star||``.

    ``contrasts`` is a list of ``(coefficient, allocation, cells)`` with
    ``cells=None`` meaning the whole region; ``F`` is the corresponding
    linear combination of interventional mean measures.  Both sides use the
    same Monte Carlo streams.
    """
    names = list(theta_star.names()) if names is None else list(names)
    idx = theta_star.index(names)
    dist = float(np.linalg.norm(theta_hat.vector()[idx] - theta_star.vector()[idx]))
    if L_hat is None:
        L_hat = estimate_lipschitz(theta_star, window, t_star, tess, contrasts, names, n_reps=n_reps, seed=seed,
                                   horizon=horizon, method=method)
    vol = _volume(window, t_star, tess, contrasts, horizon)
    if dist == 0.0:
        lhs = 0.0
    else:
        f_hat = _contrast(theta_hat, window, t_star, tess, contrasts, n_reps, seed, horizon, method)
        f_star = _contrast(theta_star, window, t_star, tess, contrasts, n_reps, seed, horizon, method)
        lhs = abs(f_hat - f_star)
    rhs = safety * L_hat * vol * dist
    return TransferReport(lhs, rhs, L_hat, dist, vol, lhs <= rhs, safety)
