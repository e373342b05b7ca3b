"""Simulation of the superposed two-component process.

Two exact routes are provided.  ``"branching"`` builds the cluster
representation generation by generation (immigrants from the gated
background, then Poisson offspring per parent and component) and is fully
vectorised.  ``"thinning"`` runs Ogata-style thinning of the time-marginal
intensity with a dominating rate refreshed after every candidate; it is slow
and kept as an independent cross-check.

Offspring that land outside the study region are dropped and do not
reproduce, which matches the likelihood (only observed events enter the
history).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .likelihood import Labelling
from .model import Allocation, EventCatalog, Window

__all__ = ["SimConfig", "SimResult", "CounterfactualDraws", "simulate", "simulate_counterfactual", "rng_for"]

log = logging.getLogger(__name__)


def rng_for(seed, rep=0, *extra):
    """Independent generator for a (seed, replicate, ...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(rep), *map(int, extra)]))


@dataclass
class SimConfig:
    params: object
    window: Window
    t_star: float
    tess: object
    allocation: Allocation
    seed: int = 0
    method: str = "branching"
    warmup: float = 0.0
    b_value: float = 1.0
    max_events: int = 2_000_000

    def __post_init__(self):
        if self.method not in ("branching", "thinning"):
            raise ValueError("method must be 'branching' or 'thinning'")
        if self.warmup < 0:
            raise ValueError("warmup must be nonnegative")
        self.allocation.check(self.tess)


@dataclass
class SimResult:
    catalog: EventCatalog
    truth: Labelling
    n_immigrants: np.ndarray

    @property
    def labels(self):
        return self.catalog.label


def _bg_rate_per_area(params, k, area):
    return params.mu[k] * params.density_scale(area)


def _sample_background(rng, params, k, t0, t1, region, area):
    """Candidate immigrants of component ``k`` over the whole region on ``(t0, t1]``."""
    if t1 <= t0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    rate = _bg_rate_per_area(params, k, area) * (t1 - t0)
    x0, x1, y0, y1 = region
    bg = params.background
    if bg is None:
        n = rng.poisson(rate * area)
        x = rng.uniform(x0, x1, n)
        y = rng.uniform(y0, y1, n)
    else:
        lam = rate * bg.weights[k].ravel() * bg.pixel_area
        counts = rng.poisson(lam)
        pix = np.repeat(np.arange(lam.size), counts)
        iy, ix = np.divmod(pix, bg.nx)
        bx0, bx1, by0, by1 = bg.region
        dx = (bx1 - bx0) / bg.nx
        dy = (by1 - by0) / bg.ny
        x = bx0 + (ix + rng.uniform(size=pix.size)) * dx
        y = by0 + (iy + rng.uniform(size=pix.size)) * dy
    t = rng.uniform(t0, t1, x.size)
    return t, x, y


def _immigrants(rng, params, window, t_star, tess, allocation, t_begin):
    """Background events: control everywhere up to ``t_star``, then gated."""
    region = window.region
    area = window.area
    T = window.t_end
    ts, xs, ys, ls = [], [], [], []
    t, x, y = _sample_background(rng, params, 0, t_begin, t_star, region, area)
    ts.append(t), xs.append(x), ys.append(y), ls.append(np.zeros(t.size, dtype=np.int8))
    for k in range(2):
        t, x, y = _sample_background(rng, params, k, t_star, T, region, area)
        if params.gating == "allocation":
            keep = allocation.z[tess.cell_index(x, y)] == k
            t, x, y = t[keep], x[keep], y[keep]
        ts.append(t), xs.append(x), ys.append(y), ls.append(np.full(t.size, k, dtype=np.int8))
    return [np.concatenate(a) for a in (ts, xs, ys, ls)]


def _gr_mags(rng, n, kern, b_value):
    return kern.m0 + rng.exponential(1.0 / (b_value * np.log(10.0)), n)


def _offspring(rng, kern, t, x, y, mag, lab, b_value):
    """One generation of children for parents ``(t, x, y, mag, lab)``."""
    out = []
    for k in range(2):
        if kern.family == "expgauss":
            m = kern.branching_matrix(truncated=True)[k, lab]
        else:
            m = kern.productivity(mag, k, lab)
        n = rng.poisson(m)
        if not n.any():
            continue
        par = np.repeat(np.arange(t.size), n)
        l = lab[par]
        if kern.family == "expgauss":
            b = kern.beta[k, l]
            a = kern.alpha[k, l]
            u = rng.uniform(size=par.size)
            dt = -np.log1p(-u * (-np.expm1(-b * kern.h))) / b
            sd = 1.0 / np.sqrt(2.0 * a)
            lim = ndtr(kern.R / sd)
            dx = sd * ndtri(1.0 - lim + rng.uniform(size=par.size) * (2.0 * lim - 1.0))
            dy = sd * ndtri(1.0 - lim + rng.uniform(size=par.size) * (2.0 * lim - 1.0))
            cm = None
        else:
            u = rng.uniform(size=par.size)
            dt = kern.c * ((1.0 - u * kern.omori_norm()) ** (1.0 / (1.0 - kern.p)) - 1.0)
            d = kern.scale(mag[par])
            v = rng.uniform(size=par.size)
            r = np.sqrt(d * ((1.0 - v) ** (1.0 / (1.0 - kern.q)) - 1.0))
            th = rng.uniform(0.0, 2.0 * np.pi, par.size)
            dx = r * np.cos(th)
            dy = r * np.sin(th)
            cm = _gr_mags(rng, par.size, kern, b_value)
        out.append((t[par] + dt, x[par] + dx, y[par] + dy, cm, np.full(par.size, k, dtype=np.int8)))
    if not out:
        return None
    cat = [np.concatenate([o[i] for o in out]) for i in (0, 1, 2, 4)]
    cm = None if kern.family == "expgauss" else np.concatenate([o[3] for o in out])
    return cat[0], cat[1], cat[2], cm, cat[3]


def _spectral_check(params, b_value):
    kern = params.kernel
    B = kern.branching_matrix(b_value=b_value) if kern.family == "etas" else kern.branching_matrix(truncated=True)
    if not np.all(np.isfinite(B)):
        raise ValueError("spectral radius ≥ 1 (infinite offspring mean)")
    rho = float(np.max(np.abs(np.linalg.eigvals(B))))
    if rho >= 1.0:
        raise ValueError(f"spectral radius ≥ 1 (got {rho:.4f})")
    return rho


def _branching(rng, cfg, t_begin):
    params = cfg.params
    kern = params.kernel
    window = cfg.window
    _spectral_check(params, cfg.b_value)
    t, x, y, lab = _immigrants(rng, params, window, cfg.t_star, cfg.tess, cfg.allocation, t_begin)
    etas = kern.family == "etas"
    mag = _gr_mags(rng, t.size, kern, cfg.b_value) if etas else None
    n_imm = np.bincount(lab[t > cfg.t_star], minlength=2)
    parts = [(t, x, y, mag, lab)]
    total = t.size
    gen = parts[0]
    while gen[0].size and not kern.is_null():
        kids = _offspring(rng, kern, *gen, cfg.b_value)
        if kids is None:
            break
        kt, kx, ky, km, kl = kids
        keep = (kt <= window.t_end) & window.contains_xy(kx, ky)
        gen = (kt[keep], kx[keep], ky[keep], None if km is None else km[keep], kl[keep])
        total += gen[0].size
        if total > cfg.max_events:
            raise RuntimeError(f"explosion guard: more than {cfg.max_events} events")
        parts.append(gen)
    cols = [np.concatenate([p[i] for p in parts]) for i in (0, 1, 2, 4)]
    mags = np.concatenate([p[3] for p in parts]) if etas else None
    return cols[0], cols[1], cols[2], mags, cols[3], n_imm


def _time_marginal_sources(params, t_now, t_star, tess, allocation, area, ev, horizon, masses, post=None):
    """Rates of every source of the time-marginal intensity at ``t_now``.

    ``post`` overrides the background regime (used for the right limit at
    ``t_star`` when building the dominating rate).
    """
    kern = params.kernel
    et, el, emag = ev
    lo = np.searchsorted(et, t_now - horizon, side="left")
    # the dominating rate must include events sitting exactly at t_now
    hi = np.searchsorted(et, t_now, side="right" if post is not None else "left")
    js = np.arange(lo, hi)
    bg = np.zeros(2)
    if not (t_now > t_star if post is None else post):
        bg[0] = masses[0].sum() * _bg_rate_per_area(params, 0, area)
    else:
        for k in range(2):
            allowed = masses[k] if params.gating == "none" else masses[k] * (allocation.z == k)
            bg[k] = allowed.sum() * _bg_rate_per_area(params, k, area)
    if js.size == 0 or kern.is_null():
        return bg, js, np.zeros((0, 2))
    dt = np.maximum(t_now - et[js], np.finfo(float).tiny)
    rates = np.zeros((js.size, 2))
    for k in range(2):
        if kern.family == "expgauss":
            b = kern.beta[k, el[js]]
            full = kern.branching_matrix(truncated=True)[k, el[js]]
            tm = (1.0 - np.exp(-b * kern.h)) / b
            rates[:, k] = np.where(dt <= kern.h, full / tm * np.exp(-b * dt), 0.0)
        else:
            rates[:, k] = kern.productivity(emag[js], k, el[js]) * kern.omori(dt)
    return bg, js, rates


def _thinning(rng, cfg, t_begin):
    params = cfg.params
    kern = params.kernel
    window = cfg.window
    tess = cfg.tess
    area = window.area
    etas = kern.family == "etas"
    if params.background is not None:
        masses = params.background.cell_masses(tess)
    else:
        masses = np.stack([tess.areas, tess.areas])
    T = window.t_end
    et, ex, ey, el, em = [], [], [], [], []
    n_imm = np.zeros(2, dtype=int)
    t = t_begin
    while True:
        ev = (np.asarray(et), np.asarray(el, dtype=int), np.asarray(em) if etas else None)
        bg, js, rates = _time_marginal_sources(params, t, cfg.t_star, tess, cfg.allocation, area, ev, kern.horizon,
                                               masses, post=t >= cfg.t_star)
        # kernel time-marginals are nonincreasing in lag, so the current total
        # dominates the rate until the next accepted point or regime switch
        bound = bg.sum() + rates.sum()
        if bound <= 0:
            if t < cfg.t_star:
                t = cfg.t_star
                continue
            break
        t_new = t + rng.exponential(1.0 / bound)
        if t < cfg.t_star < t_new:
            t = cfg.t_star
            continue
        if t_new > T:
            break
        bg_n, js_n, rates_n = _time_marginal_sources(params, t_new, cfg.t_star, tess, cfg.allocation, area, ev, kern.horizon, masses)
        lam = bg_n.sum() + rates_n.sum()
        t = t_new
        if rng.uniform() * bound > lam:
            continue
        weights = np.concatenate([bg_n, rates_n.ravel()])
        src = rng.choice(weights.size, p=weights / weights.sum())
        if src < 2:
            k = src
            x, y = _sample_bg_point(rng, params, k, t, cfg, masses)
            parent = None
        else:
            p_i, k = divmod(src - 2, 2)
            parent = js_n[p_i]
            x, y = _sample_child_offset(rng, kern, k, el[parent], None if not etas else em[parent])
            x += ex[parent]
            y += ey[parent]
        if not window.contains_xy(x, y):
            continue
        et.append(t), ex.append(x), ey.append(y), el.append(k)
        if etas:
            em.append(float(_gr_mags(rng, 1, kern, cfg.b_value)[0]))
        if parent is None and t > cfg.t_star:
            n_imm[k] += 1
        if len(et) > cfg.max_events:
            raise RuntimeError(f"explosion guard: more than {cfg.max_events} events")
    return (np.asarray(et), np.asarray(ex), np.asarray(ey), np.asarray(em) if etas else None,
            np.asarray(el, dtype=np.int8), n_imm)


def _sample_bg_point(rng, params, k, t, cfg, masses):
    tess = cfg.tess
    allowed = masses[k].copy()
    if t > cfg.t_star and params.gating == "allocation":
        allowed *= cfg.allocation.z == k
    x0, x1, y0, y1 = cfg.window.region
    bg = params.background
    while True:
        if bg is None:
            x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
            wgt = 1.0
        else:
            w = bg.weights[k].ravel()
            pix = rng.choice(w.size, p=w / w.sum())
            iy, ix = divmod(pix, bg.nx)
            bx0, bx1, by0, by1 = bg.region
            x = bx0 + (ix + rng.uniform()) * (bx1 - bx0) / bg.nx
            y = by0 + (iy + rng.uniform()) * (by1 - by0) / bg.ny
            wgt = 1.0
        j = tess.cell_index(x, y)[0]
        if j >= 0 and allowed[j] > 0 and rng.uniform() <= wgt:
            return x, y


def _sample_child_offset(rng, kern, k, l, mag):
    if kern.family == "expgauss":
        sd = 1.0 / np.sqrt(2.0 * kern.alpha[k, l])
        lim = ndtr(kern.R / sd)
        u = 1.0 - lim + rng.uniform(size=2) * (2.0 * lim - 1.0)
        dx, dy = sd * ndtri(u)
        return float(dx), float(dy)
    d = float(kern.scale(mag))
    v = rng.uniform()
    r = np.sqrt(d * ((1.0 - v) ** (1.0 / (1.0 - kern.q)) - 1.0))
    th = rng.uniform(0.0, 2.0 * np.pi)
    return float(r * np.cos(th)), float(r * np.sin(th))


def _assemble(cfg, t, x, y, mag, lab, t_begin):
    window = cfg.window
    keep = t > window.t_start
    t, x, y, lab = t[keep], x[keep], y[keep], lab[keep]
    mag = None if mag is None else mag[keep]
    order = np.argsort(t, kind="stable")
    t, x, y, lab = t[order], x[order], y[order], lab[order]
    mag = None if mag is None else mag[order]
    dup = np.flatnonzero(np.diff(t) <= 0)
    if dup.size:
        log.warning("perturbing %d tied event times by one ulp", dup.size)
        t = t.copy()
        for i in dup:
            t[i + 1] = np.nextafter(t[i], np.inf) if t[i + 1] <= t[i] else t[i + 1]
    return EventCatalog(t, x, y, cfg.t_star, window, mag=mag, label=lab)


def simulate(cfg: SimConfig, rep: int = 0) -> SimResult:
    """One realisation on ``(t_start, t_end]`` with true labels attached.

    With ``warmup > 0`` the process starts at ``t_start - warmup`` (all
    control) and events before ``t_start`` are discarded after they have
    produced their offspring.
    """
    rng = rng_for(cfg.seed, rep)
    t_begin = cfg.window.t_start - cfg.warmup
    if cfg.method == "branching":
        t, x, y, mag, lab, n_imm = _branching(rng, cfg, t_begin)
    else:
        t, x, y, mag, lab, n_imm = _thinning(rng, cfg, t_begin)
    cat = _assemble(cfg, t, x, y, mag, lab, t_begin)
    return SimResult(cat, Labelling(cat.truth, cat.catalog_id), np.asarray(n_imm))


@dataclass
class CounterfactualDraws:
    """Post-``t_star`` counts under one allocation, one row per replicate."""

    total: np.ndarray
    per_cell: np.ndarray
    per_component: np.ndarray
    immigrants: np.ndarray
    allocation: Allocation
    horizon: float

    @property
    def n_reps(self):
        return self.total.size


def simulate_counterfactual(params, window, t_star, tess, z, n_reps, seed, horizon=None,
                            method="branching", b_value=1.0, warmup=0.0) -> CounterfactualDraws:
    """Monte Carlo draws of ``N^z(I_j)`` and ``N^z(D)`` under allocation ``z``.

    Replicate ``r`` uses the stream ``(seed, r)`` whatever the allocation, so
    calls with different ``z`` and the same seed share common random numbers.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    z = z if isinstance(z, Allocation) else Allocation(np.asarray(z))
    horizon = window.t_end - t_star if horizon is None else float(horizon)
    if not 0 < horizon <= window.t_end - t_star + 1e-12:
        raise ValueError("horizon must lie in (0, T - t_star]")
    w = Window(window.t_start, t_star + horizon, *window.region)
    cfg = SimConfig(params, w, t_star, tess, z, seed=seed, method=method, warmup=warmup, b_value=b_value)
    J = tess.n_cells
    total = np.zeros(n_reps, dtype=int)
    per_cell = np.zeros((n_reps, J), dtype=int)
    per_comp = np.zeros((n_reps, 2), dtype=int)
    imm = np.zeros((n_reps, 2), dtype=int)
    for r in range(n_reps):
        res = simulate(cfg, rep=r)
        cat = res.catalog
        post = slice(cat.n_pre, cat.n)
        cells = tess.cell_index(cat.x[post], cat.y[post])
        total[r] = cat.n_post
        per_cell[r] = np.bincount(cells, minlength=J)
        per_comp[r] = np.bincount(cat.label[post], minlength=2)
        imm[r] = res.n_immigrants
    return CounterfactualDraws(total, per_cell, per_comp, imm, z, horizon)
