"""Predictable blockwise penalised hard-EM.

Post-``t_star`` time is cut into blocks ``t_star = u_0 < ... < u_T = T``.
At block ``m`` the parameter ``theta^(m)`` is frozen and the events of
``(u_m, u_{m+1}]`` are labelled one at a time, in event order, by

    argmax_k  log lambda_hat_k(gamma_i; theta^(m)) - alpha K_win 1{decisive, k minority},

with earlier labels fixed and never revised.  The M-step then maximises the
prefix likelihood ``l_r^[u_{m+1}]``.  Decisive sets come either from the
current iterate and current labels (self-consistent mode) or from supplied
oracle parameters together with the true labels (oracle mode).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .diagnostics import window_envelope
from .fitting import free_names, mstep
from .likelihood import Labelling, event_intensities, loglik_value
from .model import _full_labels

__all__ = [
    "Schedule",
    "HardEmConfig",
    "HardEmTrace",
    "HardEmResult",
    "HardEmAborted",
    "run_hard_em",
    "penalized_objective",
    "decisive_minorities",
    "greedy_labels",
    "oracle_scores",
    "blockwise_error_accounting",
]

log = logging.getLogger(__name__)


class Schedule:
    """Deterministic cut times ``t_star = u_0 < u_1 < ... < u_T = T``."""

    def __init__(self, cuts):
        cuts = np.asarray(cuts, dtype=float)
        if cuts.ndim != 1 or cuts.size < 2:
            raise ValueError("a schedule needs at least two cut times")
        if np.any(np.diff(cuts) <= 0):
            raise ValueError("schedule cut times must be strictly increasing")
        self.cuts = cuts

    @classmethod
    def dyadic(cls, t_star, t_end, n_blocks=6):
        """Doubling prefixes: ``u_m - t_star = (T - t_star) 2^(m - n_blocks)``."""
        if n_blocks < 1:
            raise ValueError("n_blocks must be at least 1")
        m = np.arange(1, n_blocks + 1)
        return cls(np.concatenate([[t_star], t_star + (t_end - t_star) * 2.0 ** (m - n_blocks)]))

    @classmethod
    def uniform(cls, t_star, t_end, n_blocks):
        return cls(np.linspace(t_star, t_end, n_blocks + 1))

    def __len__(self):
        return self.cuts.size - 1

    def __repr__(self):
        return f"Schedule({self.cuts.tolist()})"

    @property
    def t_star(self):
        return float(self.cuts[0])

    def prefix_volumes(self, area):
        """``|D^(m)|`` for ``m = 0..T``."""
        return area * (self.cuts - self.cuts[0])

    def block_volumes(self, area):
        """``|D_m|`` for ``m = 1..T``."""
        return area * np.diff(self.cuts)

    def omegas(self):
        """``omega_m = |D^(m)| / |D^(m+1)|`` for ``m = 0..T-1``."""
        p = self.cuts - self.cuts[0]
        return p[:-1] / p[1:]


@dataclass
class HardEmConfig:
    """Settings of :func:`run_hard_em`.

    Parameters
    ----------
    schedule : Schedule, optional
        Defaults to six dyadic blocks over ``(t_star, T]``.
    b : float
        Decisiveness threshold.
    alpha : float
        Penalty level on decisive minority labels.
    K_win_hat : float, optional
        Window envelope; computed from the catalog at the warm start when
        omitted.
    oracle_params : ModelParams, optional
        Enables oracle decisive sets (scores at these parameters under the
        true labels); needs a catalog with truth.
    opt : OptConfig, optional
        M-step optimiser settings (bounds, localisation).
    free : list of str, optional
        Coordinates updated in the M-step.
    include_pre : bool
        Add the pre-``t_star`` period to each prefix likelihood.
    """

    schedule: Optional[Schedule] = None
    b: float = 0.5
    alpha: float = 2.0
    K_win_hat: Optional[float] = None
    oracle_params: Optional[object] = None
    opt: Optional[object] = None
    free: Optional[list] = None
    tie_break: str = "non_minority"
    include_pre: bool = False
    n_blocks: int = 6

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("b must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.tie_break != "non_minority":
            raise ValueError("only the 'non_minority' tie-break rule is available")
        if self.K_win_hat is not None and not self.K_win_hat > 0:
            raise ValueError("K_win_hat must be positive")


@dataclass
class HardEmTrace:
    """Per-block records; index ``m`` refers to block ``D_{m+1}``."""

    u: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    block_labels: list = field(default_factory=list)
    labels_after: list = field(default_factory=list)
    n_block: list = field(default_factory=list)
    flips_to_oracle: list = field(default_factory=list)
    e: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    n_ambiguous: list = field(default_factory=list)
    n_minority: list = field(default_factory=list)
    score_slack: list = field(default_factory=list)
    penalized: list = field(default_factory=list)
    loglik_before: list = field(default_factory=list)
    loglik_after: list = field(default_factory=list)
    K_win_hat: float = float("nan")
    notes: list = field(default_factory=list)

    def rows(self):
        for m in range(len(self.u)):
            yield {
                "block": m + 1,
                "u": self.u[m],
                "n_events": self.n_block[m],
                "flips_to_oracle": self.flips_to_oracle[m],
                "e": self.e[m],
                "eps": self.eps[m],
                "omega": self.omega[m],
                "n_ambiguous": self.n_ambiguous[m],
                "n_decisive_minority": self.n_minority[m],
                "score_slack": self.score_slack[m],
                "penalized_objective": self.penalized[m],
                "loglik_before": self.loglik_before[m],
                "loglik_after": self.loglik_after[m],
            }


class HardEmResult(NamedTuple):
    params: object
    labelling: Labelling
    trace: HardEmTrace


class HardEmAborted(RuntimeError):
    """An M-step failed; ``trace`` holds the blocks completed so far."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def _log_intensities(params, catalog, labels, tess, allocation, idx):
    lam = event_intensities(params, catalog, labels, tess, allocation, idx)
    return np.log(np.maximum(lam, params.mu_min))


def oracle_scores(params, catalog, tess, allocation, idx=None):
    """``s^or(gamma_i)`` under ``params`` with the true labels as history."""
    if not catalog.has_truth:
        raise ValueError("oracle scores need the true labels")
    idx = np.arange(catalog.n_pre, catalog.n) if idx is None else np.asarray(idx)
    ll = _log_intensities(params, catalog, np.asarray(catalog.label), tess, allocation, idx)
    return ll[:, 1] - ll[:, 0]


def greedy_labels(params, catalog, tess, allocation):
    """Label post-``t_star`` events in time order by ``argmax_k log lambda_hat_k``.

    Each choice sees only earlier labels; ties go to control.
    """
    labels = np.asarray(catalog.label).copy()
    labels[catalog.n_pre:] = -1
    for i in range(catalog.n_pre, catalog.n):
        lk = _log_intensities(params, catalog, labels, tess, allocation, [i])[0]
        labels[i] = 1 if lk[1] > lk[0] else 0
    return Labelling(labels[catalog.n_pre:].astype(np.int8), catalog.catalog_id)


def decisive_minorities(scores, bits, b):
    """Boolean mask of decisive events carrying the minority label."""
    scores = np.asarray(scores)
    bits = np.asarray(bits)
    return ((scores >= b) & (bits == 0)) | ((scores <= -b) & (bits == 1))


def penalized_objective(params, catalog, labelling, b, alpha, K_win_hat, allocation, tess, upto=None,
                        scores=None, start=None):
    """``l_r^[u](theta) - alpha K_win #{decisive events with minority labels, t <= u}``.

    ``scores`` fixes the decisive sets; by default they are the oracle
    scores at ``params`` when the catalog carries truth, else the
    label-induced scores under ``labelling``.
    """
    if not K_win_hat > 0:
        raise ValueError("K_win_hat must be positive")
    labels = _full_labels(catalog, labelling)
    upto = catalog.window.t_end if upto is None else float(upto)
    ll = loglik_value(params, catalog, labels, allocation, tess, start=start, upto=upto)
    if alpha == 0:
        return ll
    i1 = int(np.searchsorted(catalog.t, upto, side="right"))
    idx = np.arange(catalog.n_pre, max(i1, catalog.n_pre))
    if scores is None:
        if catalog.has_truth:
            scores = oracle_scores(params, catalog, tess, allocation, idx)
        else:
            l2 = _log_intensities(params, catalog, labels, tess, allocation, idx)
            scores = l2[:, 1] - l2[:, 0]
    else:
        scores = np.asarray(scores)[: idx.size]
    n_min = int(np.count_nonzero(decisive_minorities(scores, labels[idx], b)))
    return ll - alpha * K_win_hat * n_min


def run_hard_em(catalog, tess, allocation, init, cfg: Optional[HardEmConfig] = None, truth=None) -> HardEmResult:
    """Run the blockwise operator from the warm start ``init``.

    ``truth`` (a :class:`Labelling` or bit array, defaulting to the catalog's
    own labels when present) enables the error accounting in the trace.
    """
    cfg = HardEmConfig() if cfg is None else cfg
    allocation.check(tess)
    if catalog.n_post == 0:
        raise ValueError("catalog has no post-t* events")
    sched = cfg.schedule or Schedule.dyadic(catalog.t_star, catalog.window.t_end, cfg.n_blocks)
    if abs(sched.cuts[0] - catalog.t_star) > 1e-12 or abs(sched.cuts[-1] - catalog.window.t_end) > 1e-9:
        raise ValueError("schedule must run from t_star to the window end")
    if truth is None and catalog.has_truth:
        truth = catalog.truth
    truth = None if truth is None else np.asarray(getattr(truth, "bits", truth))
    if truth is not None and truth.size != catalog.n_post:
        raise ValueError("truth length does not match the post-t* event count")
    oracle = cfg.oracle_params
    if oracle is not None and not catalog.has_truth:
        raise ValueError("oracle mode needs a catalog with true labels")

    names = free_names(init) if cfg.free is None else list(cfg.free)
    kern = init.kernel
    K_win = cfg.K_win_hat
    if K_win is None:
        h = kern.horizon
        R = kern.radius or max(catalog.window.region[1] - catalog.window.region[0],
                               catalog.window.region[3] - catalog.window.region[2])
        K_win = window_envelope(catalog, h, R, init).K_win_hat
    start = catalog.window.t_start if cfg.include_pre else None
    pen = cfg.alpha * K_win
    area = catalog.window.area
    pv = sched.prefix_volumes(area)
    bv = sched.block_volumes(area)
    omegas = sched.omegas()
    s_or_all = oracle_scores(oracle, catalog, tess, allocation) if oracle is not None else None

    labels = np.asarray(catalog.label).copy()
    labels[catalog.n_pre:] = -1
    params = init
    trace = HardEmTrace(K_win_hat=float(K_win))
    mis_prefix = 0
    n0 = catalog.n_pre
    for m in range(len(sched)):
        a, u = sched.cuts[m], sched.cuts[m + 1]
        i0 = int(np.searchsorted(catalog.t, a, side="right"))
        i1 = int(np.searchsorted(catalog.t, u, side="right"))
        block = np.arange(i0, i1)
        slack = 0.0
        n_amb = n_min = 0
        # E-step: sequential greedy labelling with theta^(m) frozen
        for i in block:
            lk = _log_intensities(params, catalog, labels, tess, allocation, [i])[0]
            s_cur = lk[1] - lk[0]
            s = s_cur if s_or_all is None else s_or_all[i - n0]
            if s_or_all is not None:
                slack = max(slack, abs(s_cur - s))
            obj = lk.copy()
            minority = None
            if s >= cfg.b:
                minority = 0
            elif s <= -cfg.b:
                minority = 1
            else:
                n_amb += 1
            if minority is not None:
                obj[minority] -= pen
                lab = 1 - minority if obj[1 - minority] >= obj[minority] else minority
                n_min += int(lab == minority)
            else:
                lab = 1 if obj[1] > obj[0] else 0
            labels[i] = lab
        bits_block = labels[i0:i1].copy()
        ll_before = loglik_value(params, catalog, labels, allocation, tess, start=start, upto=u)
        if block.size == 0:
            trace.notes.append(f"block {m + 1} ({a:g}, {u:g}] is empty; skipped")
            new_params = params
            ll_after = ll_before
        else:
            try:
                new_params, res = mstep(params, catalog, labels, allocation, tess, names, opt=cfg.opt,
                                        start=start, upto=u)
                ll_after = res.loglik
            except (FloatingPointError, ValueError, ArithmeticError) as exc:
                raise HardEmAborted(f"M-step failed in block {m + 1}: {exc}", trace) from exc
        if truth is not None:
            mis_block = int(np.count_nonzero(bits_block != truth[i0 - n0:i1 - n0]))
            mis_prefix += mis_block
            trace.flips_to_oracle.append(mis_block)
            trace.e.append(mis_prefix / pv[m + 1])
            trace.eps.append(mis_block / bv[m])
        else:
            trace.flips_to_oracle.append(None)
            trace.e.append(None)
            trace.eps.append(None)
        post_bits = labels[n0:]
        upto_mask = np.arange(catalog.n_post) < (i1 - n0)
        scored = post_bits.copy()
        scored[~upto_mask] = 0
        j = penalized_objective(new_params, catalog, scored, cfg.b, cfg.alpha, K_win, allocation, tess, upto=u,
                                scores=s_or_all, start=start)
        trace.u.append(float(u))
        trace.theta.append(new_params.vector())
        trace.block_labels.append(bits_block)
        trace.labels_after.append(post_bits.copy())
        trace.n_block.append(int(block.size))
        trace.omega.append(float(omegas[m]))
        trace.n_ambiguous.append(n_amb)
        trace.n_minority.append(n_min)
        trace.score_slack.append(float(slack) if s_or_all is not None else None)
        trace.penalized.append(float(j))
        trace.loglik_before.append(float(ll_before))
        trace.loglik_after.append(float(ll_after))
        params = new_params
    return HardEmResult(params, Labelling(labels[n0:].astype(np.int8), catalog.catalog_id), trace)


def blockwise_error_accounting(trace: HardEmTrace, truth, catalog=None, schedule=None) -> list:
    """Rows ``(m, e_m, eps_m, omega_{m-1}, residual)`` of the averaging identity.

    ``e_m`` is re-derived by a direct recount of the prefix Hamming distance
    from the stored labels when ``catalog`` and ``schedule`` are given;
    otherwise the trace's own values are used.
    """
    truth = np.asarray(getattr(truth, "bits", truth))
    if not trace.labels_after:
        return []
    if trace.labels_after[-1].size != truth.size:
        raise ValueError("truth length does not match the traced labelling")
    if catalog is not None and schedule is not None:
        pv = schedule.prefix_volumes(catalog.window.area)
        bv = schedule.block_volumes(catalog.window.area)
        e, eps = [], []
        for m, u in enumerate(trace.u):
            n_u = int(np.searchsorted(catalog.t, u, side="right")) - catalog.n_pre
            a_n = int(np.searchsorted(catalog.t, schedule.cuts[m], side="right")) - catalog.n_pre
            lab = trace.labels_after[m]
            e.append(np.count_nonzero(lab[:n_u] != truth[:n_u]) / pv[m + 1])
            eps.append(np.count_nonzero(lab[a_n:n_u] != truth[a_n:n_u]) / bv[m])
    else:
        e, eps = list(trace.e), list(trace.eps)
    rows = []
    prev = 0.0
    for m in range(len(e)):
        w = trace.omega[m]
        resid = abs(e[m] - w * prev - (1 - w) * eps[m])
        rows.append({"m": m + 1, "e": float(e[m]), "eps": float(eps[m]), "omega": float(w), "residual": float(resid)})
        prev = e[m]
    return rows
