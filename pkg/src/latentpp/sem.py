"""Stochastic EM with the discrepancy-guided relabelling proposal.

Each outer round runs a short stochastic hill-climb over labellings at the
current parameter ``theta'``: proposals are drawn around the current
labelling by comparing per-cell control-labelled counts with the counts the
control component predicts, and the best proposal is kept whenever it raises
the complete-data log-likelihood.  The best labellings seen in the round
form the retained set; the M-step maximises the weighted objective

    Q_dagger(theta) = sum_i w_i l_{r_i}(theta)

with equal weights (``"uniform_top"``) or weights proportional to
``exp(l_{r_i}(theta'))`` (``"self_normalized"``; the proposal mass is
treated as uniform, so this is an approximation except under exhaustive
enumeration).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fitting import _scales, default_bounds, fit_pre_control, free_names, mstep, naive_labelling
from .likelihood import (
    Labelling,
    _background_masses,
    _base_background,
    _event_range,
    cell_compensators,
    event_intensities,
    loglik_batch,
    loglik_value,
    loglik_value_grad,
    per_flip_delta,
)
from .optimize import OptConfig, maximize
from .simulate import rng_for

__all__ = [
    "DiscrepancyProposalConfig",
    "SemConfig",
    "SemTrace",
    "SemResult",
    "propose_labelling",
    "label_scores",
    "run_sem",
    "greedy_sweep",
]

log = logging.getLogger(__name__)


@dataclass
class DiscrepancyProposalConfig:
    """Knobs of the discrepancy-guided proposal.

    Parameters
    ----------
    flip_cap_fraction : float
        Largest fraction of post-``t_star`` events flipped by one proposal.
    rank_by_score : bool
        Prefer high-score control points for 0 -> 1 flips (and low-score
        treated points for 1 -> 0) instead of choosing uniformly.
    temperature : float
        Softness of the score-weighted selection.
    budget_scale : float
        Multiplier on the Poisson flip-budget means.
    observed : {"labelled", "total"}
        ``"labelled"`` compares the control prediction with the number of
        currently control-labelled events in the cell; ``"total"`` with all
        events in the cell.
    """

    flip_cap_fraction: float = 0.05
    rank_by_score: bool = True
    temperature: float = 0.08
    budget_scale: float = 0.1
    observed: str = "labelled"

    def __post_init__(self):
        if not 0 < self.flip_cap_fraction <= 1:
            raise ValueError("flip_cap_fraction must lie in (0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.observed not in ("labelled", "total"):
            raise ValueError("observed must be 'labelled' or 'total'")


@dataclass
class SemConfig:
    n_outer: int = 15
    n_inner: int = 10
    n_proposals: int = 8
    retain_top: int = 5
    proposal: DiscrepancyProposalConfig = field(default_factory=DiscrepancyProposalConfig)
    opt: Optional[OptConfig] = None
    init_labelling: str = "cell_treatment"
    seed: int = 0
    weight_mode: str = "uniform_top"
    anchor: str = "freeze"
    patience: int = 3
    exhaustive: bool = False
    max_exhaustive: int = 20
    free: Optional[list] = None
    local_search: bool = True
    max_sweeps: int = 2

    def __post_init__(self):
        if self.n_proposals < 1:
            raise ValueError("need at least one proposal per round")
        if not 1 <= self.retain_top:
            raise ValueError("retain_top must be at least 1")
        if self.retain_top > self.n_proposals * max(self.n_inner, 1) + 1:
            raise ValueError("retain_top cannot exceed the number of labellings scored per round")
        if self.weight_mode not in ("uniform_top", "self_normalized"):
            raise ValueError("weight_mode must be 'uniform_top' or 'self_normalized'")
        if self.anchor not in ("freeze", "joint", "none"):
            raise ValueError("anchor must be 'freeze', 'joint' or 'none'")
        if self.init_labelling not in ("cell_treatment", "provided"):
            raise ValueError("init_labelling must be 'cell_treatment' or 'provided'")


@dataclass
class SemTrace:
    best_loglik: list = field(default_factory=list)
    proposed_flips: list = field(default_factory=list)
    accepted_flips: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    mstep_fallback: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def rows(self):
        for m, (ll, pf, af, fb) in enumerate(
            zip(self.best_loglik, self.proposed_flips, self.accepted_flips, self.mstep_fallback)
        ):
            yield {"outer": m, "best_loglik": ll, "proposed_flips": pf, "accepted_flips": af, "mstep_fallback": fb}


@dataclass
class SemResult:
    params: object
    labelling: Labelling
    loglik: float
    trace: SemTrace
    converged: bool
    free: list


def label_scores(params, catalog, labels, tess, allocation):
    """Label-induced ``log(lambda_1 / lambda_0)`` at every post-``t_star`` event."""
    idx = np.arange(catalog.n_pre, catalog.n)
    lam = np.maximum(event_intensities(params, catalog, labels, tess, allocation, idx), params.mu_min)
    return np.log(lam[:, 1]) - np.log(lam[:, 0])


def _select(rng, cand, keys, k):
    if k >= cand.size:
        return cand
    if keys is None:
        return rng.choice(cand, k, replace=False)
    # Gumbel top-k: a draw without replacement with weights exp(keys)
    g = keys + rng.gumbel(size=cand.size)
    return cand[np.argpartition(-g, k - 1)[:k]]


def propose_labelling(params, catalog, labelling, tess, allocation, cfg: DiscrepancyProposalConfig,
                      rng, scores=None, control_pred=None):
    """One discrepancy-guided relabelling of ``labelling``.

    Returns ``(Labelling, n_flips)``; the input comes back unchanged when
    every cell discrepancy is zero.
    """
    bits = np.asarray(getattr(labelling, "bits", labelling)).astype(np.int8)
    labels = np.asarray(catalog.label).copy()
    labels[catalog.n_pre:] = bits
    cells = catalog.cells(tess)[catalog.n_pre:]
    J = tess.n_cells
    if control_pred is None:
        control_pred = cell_compensators(params, catalog, bits, allocation, tess)[0]
    if cfg.observed == "labelled":
        c_obs = np.bincount(cells[bits == 0], minlength=J)
    else:
        c_obs = np.bincount(cells, minlength=J)
    d_plus = np.maximum(c_obs - control_pred, 0.0)
    d_minus = np.maximum(control_pred - c_obs, 0.0)
    sp, sm = d_plus.sum(), d_minus.sum()
    if sp <= 0 and sm <= 0:
        return Labelling(bits, getattr(labelling, "parent_catalog_id", None)), 0
    p_plus = rng.poisson(cfg.budget_scale * sp) if sp > 0 else 0
    p_minus = rng.poisson(cfg.budget_scale * sm) if sm > 0 else 0
    cap = max(1, int(cfg.flip_cap_fraction * bits.size))
    if p_plus + p_minus > cap:
        frac = cap / (p_plus + p_minus)
        p_plus, p_minus = int(np.floor(p_plus * frac)), int(np.floor(p_minus * frac))
    l_plus = rng.multinomial(p_plus, d_plus / sp) if p_plus else np.zeros(J, dtype=int)
    l_minus = rng.multinomial(p_minus, d_minus / sm) if p_minus else np.zeros(J, dtype=int)
    if cfg.rank_by_score and scores is None:
        scores = label_scores(params, catalog, labels, tess, allocation)
    out = bits.copy()
    for sign, counts, from_label in ((1.0, l_plus, 0), (-1.0, l_minus, 1)):
        for j in np.flatnonzero(counts):
            cand = np.flatnonzero((cells == j) & (bits == from_label))
            if cand.size == 0:
                continue
            keys = sign * scores[cand] / cfg.temperature if cfg.rank_by_score else None
            pick = _select(rng, cand, keys, int(counts[j]))
            out[pick] = 1 - from_label
    n_flips = int(np.count_nonzero(out != bits))
    return Labelling(out, getattr(labelling, "parent_catalog_id", None)), n_flips


def greedy_sweep(params, catalog, bits, allocation, tess, start=None, max_sweeps=1):
    """Single-flip coordinate ascent of ``l_r(theta)`` over the labelling.

    Events are visited in time order and a label flips whenever its exact
    per-flip delta is positive.  Returns ``(bits, n_flips)``.
    """
    bits = np.asarray(bits).astype(np.int8).copy()
    total = 0
    for _ in range(max_sweeps):
        n = 0
        for i in range(bits.size):
            if per_flip_delta(params, catalog, bits, i, allocation, tess, start=start) > 0:
                bits[i] = 1 - bits[i]
                n += 1
        total += n
        if n == 0:
            break
    return bits, total


# ---------------------------------------------------------------------------
# Weighted M-step
# ---------------------------------------------------------------------------


def _poisson_soft(params, catalog, p1, allocation, tess, start, upto):
    """Q_dagger for Poisson models via soft labels, with its gradient in ``mu``."""
    i0, i1 = _event_range(catalog, start, upto)
    idx = np.arange(i0, i1)
    base = _base_background(params, catalog, tess, allocation, idx)
    w = np.ones((idx.size, 2))
    post = idx >= catalog.n_pre
    w[post, 1] = p1[idx[post] - catalog.n_pre]
    w[post, 0] = 1.0 - w[post, 1]
    w[~post, 1] = 0.0
    bgm = _background_masses(params, catalog, tess, allocation, start, upto).sum(axis=1)
    lam = np.maximum(base * params.mu[None, :], params.mu_min)
    val = float(np.sum(w * np.log(lam)) - np.dot(params.mu, bgm))
    g = np.zeros(params.dim)
    clipped = base * params.mu[None, :] <= params.mu_min
    for k in range(2):
        ok = ~clipped[:, k]
        g[k] = np.sum(w[ok, k] / params.mu[k]) - bgm[k] if params.mu[k] > 0 else np.inf
    return val, g


def _weighted_mstep(template, catalog, retained, weights, allocation, tess, names, opt, start):
    idx = template.index(names)
    base = template.vector()
    x0 = base[idx]
    if opt is None:
        bounds = default_bounds(template, names)
        opt = OptConfig(bounds, scale=_scales(np.clip(x0, bounds[:, 0], bounds[:, 1]), bounds))
    x0 = np.clip(x0, opt.bounds[:, 0], opt.bounds[:, 1])
    full = []
    for r in retained:
        lab = np.asarray(catalog.label).copy()
        lab[catalog.n_pre:] = r
        full.append(lab)
    poisson = template.is_poisson() and all(n.startswith("mu") for n in names)
    p1 = np.average(np.stack(retained).astype(float), axis=0, weights=weights) if poisson else None
    upto = catalog.window.t_end

    def objective(x):
        v = base.copy()
        v[idx] = x
        p = template.with_vector(v)
        if poisson:
            val, g = _poisson_soft(p, catalog, p1, allocation, tess, start, upto)
            return val, g[idx]
        val = 0.0
        g = np.zeros(idx.size)
        for w, lab in zip(weights, full):
            if w == 0:
                continue
            vi, gi = loglik_value_grad(p, catalog, lab, allocation, tess, start=start, upto=upto, free=idx)
            val += w * vi
            g += w * gi[idx]
        return val, g

    res = maximize(objective, opt, x0)
    v = base.copy()
    v[idx] = res.theta_hat
    return template.with_vector(v), res


def _weights(lls, mode):
    lls = np.asarray(lls, dtype=float)
    if mode == "uniform_top":
        return np.full(lls.size, 1.0 / lls.size)
    w = np.exp(lls - lls.max())
    return w / w.sum()


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _full(catalog, bits):
    lab = np.asarray(catalog.label).copy()
    lab[catalog.n_pre:] = bits
    return lab


def run_sem(catalog, tess, allocation, init, cfg: Optional[SemConfig] = None, labelling=None) -> SemResult:
    """Stochastic EM estimate of ``theta`` and a best labelling.

    ``init`` is a :class:`~latentpp.model.ModelParams` template that fixes
    the kernel family, truncation and units and supplies starting values.
    """
    cfg = SemConfig() if cfg is None else cfg
    allocation.check(tess)
    if catalog.n_post == 0:
        raise ValueError("catalog has no post-t* events")
    names = free_names(init) if cfg.free is None else list(cfg.free)
    start = None
    params = init
    if cfg.anchor == "freeze":
        pre = fit_pre_control(catalog, tess, allocation, init)
        params = pre.params
        frozen = set(pre.free)
        names = [n for n in names if n not in frozen]
    elif cfg.anchor == "joint":
        if catalog.n_pre == 0:
            raise ValueError("joint anchoring needs pre-t* events")
        start = catalog.window.t_start
    if not names:
        raise ValueError("no free parameters left to estimate")

    if cfg.init_labelling == "provided":
        if labelling is None:
            raise ValueError("init_labelling='provided' needs a labelling")
        r_cur = np.asarray(getattr(labelling, "bits", labelling)).astype(np.int8).copy()
    else:
        r_cur = naive_labelling(catalog, tess, allocation).bits.copy()

    def ll(p, bits):
        return loglik_value(p, catalog, _full(catalog, bits), allocation, tess, start=start)

    # warm start: M-step on the initial labelling
    try:
        params, _ = mstep(params, catalog, _full(catalog, r_cur), allocation, tess, names, opt=cfg.opt, start=start)
    except (FloatingPointError, ValueError) as exc:
        log.warning("initial M-step failed (%s); keeping the template values", exc)

    trace = SemTrace()
    best_ll = ll(params, r_cur)
    best_bits = r_cur.copy()
    stale = 0
    converged = False

    all_bits = None
    if cfg.exhaustive:
        n = catalog.n_post
        if n > cfg.max_exhaustive:
            raise ValueError(f"exhaustive enumeration limited to {cfg.max_exhaustive} events, catalog has {n}")
        all_bits = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)

    for outer in range(cfg.n_outer):
        theta_prev = params
        proposed = 0
        accepted = 0
        if all_bits is not None:
            lls = loglik_batch(params, catalog, all_bits, allocation, tess, start=start)
            retained = list(all_bits)
            weights = _weights(lls, cfg.weight_mode)
            top = int(np.argmax(lls))
            r_cur = all_bits[top].copy()
            cur_ll = float(lls[top])
        else:
            cur_ll = ll(params, r_cur)
            pool = {r_cur.tobytes(): (cur_ll, r_cur.copy())}
            for inner in range(cfg.n_inner):
                lab = _full(catalog, r_cur)
                scores = label_scores(params, catalog, lab, tess, allocation) if cfg.proposal.rank_by_score else None
                c0 = cell_compensators(params, catalog, r_cur, allocation, tess)[0]
                best_prop = None
                for m in range(cfg.n_proposals):
                    rng = rng_for(cfg.seed, outer, inner, m)
                    prop, nf = propose_labelling(params, catalog, r_cur, tess, allocation, cfg.proposal, rng,
                                                 scores=scores, control_pred=c0)
                    proposed += nf
                    if nf == 0:
                        continue
                    key = prop.bits.tobytes()
                    if key not in pool:
                        pool[key] = (ll(params, prop.bits), prop.bits.copy())
                    val = pool[key][0]
                    if val > cur_ll and (best_prop is None or val > best_prop[0]):
                        best_prop = (val, prop.bits.copy(), nf)
                if best_prop is not None:
                    cur_ll, r_cur, nf = best_prop
                    accepted += nf
            if cfg.local_search:
                swept, nf = greedy_sweep(params, catalog, r_cur, allocation, tess, start, cfg.max_sweeps)
                if nf:
                    r_cur = swept
                    cur_ll = ll(params, r_cur)
                    pool.setdefault(r_cur.tobytes(), (cur_ll, r_cur.copy()))
                    accepted += nf
            ranked = sorted(pool.values(), key=lambda v: -v[0])[: cfg.retain_top]
            retained = [b for _, b in ranked]
            weights = _weights([v for v, _ in ranked], cfg.weight_mode)

        fallback = False
        try:
            cand, _ = _weighted_mstep(params, catalog, retained, weights, allocation, tess, names, cfg.opt, start)
            if cfg.weight_mode == "uniform_top" and max(ll(cand, b) for b in retained) < cur_ll:
                raise ArithmeticError("weighted M-step lost ground")
        except (ArithmeticError, ValueError) as exc:
            # fall back to the hill-climb labelling alone: the warm-started
            # maximiser cannot go below cur_ll
            fallback = True
            log.debug("outer %d: weighted M-step rejected (%s)", outer, exc)
            try:
                cand, _ = mstep(params, catalog, _full(catalog, r_cur), allocation, tess, names, opt=cfg.opt,
                                start=start)
            except (FloatingPointError, ValueError) as exc2:
                trace.notes.append(f"outer {outer}: M-step failed ({exc2}); keeping previous theta")
                cand = params
        params = cand
        round_best = max((ll(params, b), i) for i, b in enumerate(retained))
        if round_best[0] >= best_ll:
            best_ll = round_best[0]
            best_bits = np.asarray(retained[round_best[1]]).copy()
        r_cur = best_bits.copy()
        trace.best_loglik.append(best_ll)
        trace.proposed_flips.append(proposed)
        trace.accepted_flips.append(accepted)
        trace.theta.append(params.vector())
        trace.mstep_fallback.append(fallback)
        if all_bits is not None:
            if np.max(np.abs(params.vector() - theta_prev.vector())) < 1e-12:
                converged = True
                break
            continue
        stale = stale + 1 if accepted == 0 else 0
        if stale >= cfg.patience:
            converged = True
            trace.notes.append(f"stopped after {outer + 1} rounds: no accepted flips for {cfg.patience} rounds")
            break
    return SemResult(params, Labelling(best_bits, catalog.catalog_id), best_ll, trace, converged, names)
