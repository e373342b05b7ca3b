"""Goodness of fit and theory-lab measurements.

Time-rescaling residuals, per-component residual counts, the empirical
window envelope ``K_win`` and the ambiguous-band mass ``C_b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .likelihood import _background_masses, _bounds, _ranges, cell_compensators
from .model import _full_labels, intensities_at

__all__ = [
    "GofReport",
    "BandReport",
    "EnvelopeReport",
    "rescaled_times",
    "time_rescaling_test",
    "residual_counts",
    "window_envelope",
    "band_mass",
]


@dataclass
class GofReport:
    ks_statistic: float
    p_value: float
    rescaled: np.ndarray
    gaps: np.ndarray
    residuals: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        d = {"ks_statistic": float(self.ks_statistic), "p_value": float(self.p_value), "n": int(self.gaps.size)}
        if self.residuals is not None:
            d["residuals"] = self.residuals.tolist()
        return d


def rescaled_times(params, catalog, labelling=None, allocation=None, tess=None, start=None, upto=None):
    """Total compensator ``Lambda(t_i)`` at each event in ``(start, upto]``.

    ``Lambda`` integrates ``lambda_0 + lambda_1`` over the region from
    ``start`` (default the window start).
    """
    labels = _full_labels(catalog, labelling)
    start = catalog.window.t_start if start is None else start
    start, upto = _bounds(catalog, start, upto)
    i0 = int(np.searchsorted(catalog.t, start, side="right"))
    i1 = int(np.searchsorted(catalog.t, upto, side="right"))
    tau = np.concatenate([[start], catalog.t[i0:i1]])
    a, u = tau[:-1], tau[1:]
    # background: piecewise linear in t with a kink at t_star
    mu = params.mu
    ts = catalog.t_star
    r_pre = float(mu @ _background_masses(params, catalog, tess, allocation, ts - 1.0, ts).sum(axis=1))
    r_post = float(mu @ _background_masses(params, catalog, tess, allocation, ts, ts + 1.0).sum(axis=1))
    pre = np.clip(np.minimum(u, ts) - a, 0.0, None)
    post = np.clip(u - np.maximum(a, ts), 0.0, None)
    inc = r_pre * pre + r_post * post
    kern = params.kernel
    if not kern.is_null() and u.size:
        lo = np.searchsorted(catalog.t, a - kern.horizon, side="right")
        hi = np.searchsorted(catalog.t, u, side="left")
        cnt = np.maximum(hi - lo, 0)
        par = _ranges(lo, cnt)
        if par.size:
            own = np.repeat(np.arange(u.size), cnt)
            if np.any(labels[par] < 0):
                raise ValueError("labels required for every history event")
            mags = None if catalog.mag is None else catalog.mag[par]
            m = np.zeros(par.size)
            for k in range(2):
                m += kern.masses(catalog.t[par], catalog.x[par], catalog.y[par], mags, k, labels[par],
                                 a[own], u[own], catalog.window.region)
            inc += np.bincount(own, weights=m, minlength=u.size)
    if np.any(inc < -1e-10):
        raise ArithmeticError("non-monotone compensator: negative increment between events")
    return np.cumsum(inc)


def time_rescaling_test(params, catalog, labelling=None, allocation=None, tess=None, start=None, upto=None,
                        residuals=True) -> GofReport:
    """KS test of the rescaled inter-event gaps against ``Exp(1)``.

    Under a correct model the compensator maps event times to a unit-rate
    Poisson process.  Residuals are per-component ``N_k(S_j) - int lambda_k``
    over the post-``t_star`` cells, shape (2, J).
    """
    lam = rescaled_times(params, catalog, labelling, allocation, tess, start, upto)
    if lam.size < 2:
        raise ValueError("need at least two events for the time-rescaling test")
    gaps = np.diff(np.concatenate([[0.0], lam]))
    ks = stats.kstest(gaps, "expon")
    res = residual_counts(params, catalog, labelling, allocation, tess, upto=upto) if residuals else None
    return GofReport(float(ks.statistic), float(ks.pvalue), lam, gaps, res)


def residual_counts(params, catalog, labelling, allocation, tess, upto=None):
    """``N_k(I_j) - Lambda_k(I_j)`` over post-``t_star`` cells, shape (2, J)."""
    labels = _full_labels(catalog, labelling)
    _, upto = _bounds(catalog, None, upto)
    comp = cell_compensators(params, catalog, labelling, allocation, tess, upto=upto)
    i0 = catalog.n_pre
    i1 = int(np.searchsorted(catalog.t, upto, side="right"))
    cells = catalog.cells(tess)[i0:i1]
    lab = labels[i0:i1]
    J = tess.n_cells
    counts = np.stack([np.bincount(cells[lab == k], minlength=J) for k in range(2)])
    return counts - comp


# ---------------------------------------------------------------------------
# Window envelope
# ---------------------------------------------------------------------------


@dataclass
class EnvelopeReport:
    n_star: int
    K_win_hat: float
    argmax: int

    def to_dict(self) -> dict:
        return {"n_star": int(self.n_star), "K_win_hat": float(self.K_win_hat), "argmax": int(self.argmax)}


def window_envelope(catalog, h, R, params=None) -> EnvelopeReport:
    """Largest trailing window count ``N((t - h, t) x B_R(x))`` over events.

    The window is open on the left of the event itself, so an event never
    counts itself.  With ``params`` the implied envelope is
    ``n_star * max kernel sup + max background``; otherwise ``n_star``.
    ``B_R`` is the sup-norm ball, matching the kernel support.
    """
    if not (h > 0 and R > 0):
        raise ValueError("h and R must be positive")
    t, x, y = catalog.t, catalog.x, catalog.y
    n = t.size
    best, arg = 0, -1
    lo = np.searchsorted(t, t - h, side="right")
    for i in range(n):
        js = slice(lo[i], i)
        c = int(np.count_nonzero((t[js] < t[i]) & (np.abs(x[js] - x[i]) <= R) & (np.abs(y[js] - y[i]) <= R)))
        if c > best:
            best, arg = c, i
    if params is None:
        return EnvelopeReport(best, float(best), arg)
    sup = float(np.max(params.kernel.sup(catalog.mag)))
    s = params.density_scale(catalog.window.area)
    bg = float(np.max(params.mu)) * s
    if params.background is not None:
        bg *= max(params.background.sup(0), params.background.sup(1))
    return EnvelopeReport(best, best * sup + bg, arg)


# ---------------------------------------------------------------------------
# Ambiguous-band mass
# ---------------------------------------------------------------------------


@dataclass
class BandReport:
    b: float
    C_b: float
    C_b_events: float
    K_win_hat: float
    coarse: bool
    raster: tuple

    def to_dict(self) -> dict:
        return {
            "b": float(self.b),
            "C_b": float(self.C_b),
            "C_b_events": float(self.C_b_events),
            "K_win_hat": float(self.K_win_hat),
            "coarse": bool(self.coarse),
            "raster": list(self.raster),
        }


def _scores(params, catalog, labels, tess, allocation, t, x, y, floor):
    lam = np.maximum(intensities_at(params, catalog, labels, tess, allocation, t, x, y), floor)
    return np.log(lam[:, 1]) - np.log(lam[:, 0]), lam.sum(axis=1)


def _band_quadrature(params, catalog, labels, tess, allocation, bs, nx, nt, floor):
    x0, x1, y0, y1 = catalog.window.region
    ts, te = catalog.t_star, catalog.window.t_end
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(nx) + 0.5) * (y1 - y0) / nx
    tt = ts + (np.arange(nt) + 0.5) * (te - ts) / nt
    X, Y = np.meshgrid(xs, ys)
    X, Y = X.ravel(), Y.ravel()
    dv = (x1 - x0) * (y1 - y0) * (te - ts) / (nx * nx * nt)
    acc = np.zeros(len(bs))
    for t in tt:
        s, lam = _scores(params, catalog, labels, tess, allocation, np.full(X.size, t), X, Y, floor)
        for i, b in enumerate(bs):
            acc[i] += np.sum(lam[np.abs(s) <= 2 * b]) * dv
    return acc


def band_mass(params, catalog, tess, allocation, labelling=None, b=0.5, raster=(50, None), floor=1e-300,
              check=True) -> BandReport:
    """Empirical ambiguous-band mass at threshold ``b``.

    ``C_b`` integrates ``1{|s| <= 2b} (lambda_0 + lambda_1)`` over the
    post-``t_star`` window by midpoint quadrature on an ``nx`` x ``nx``
    spatial raster and ``nt`` time slabs (default slabs of half the kernel
    horizon), divided by the window volume.  ``C_b_events`` is the count of
    post-``t_star`` events in the band divided by the same volume.  With
    ``check`` the raster is halved and ``coarse`` flags a relative change
    above 10%.
    """
    if not b > 0:
        raise ValueError("threshold b must be positive")
    labels = _full_labels(catalog, labelling)
    nx, nt = raster
    dur = catalog.window.t_end - catalog.t_star
    if nt is None:
        nt = max(1, int(np.ceil(dur / (params.kernel.horizon / 2))))
    vol = catalog.window.area * dur
    c = _band_quadrature(params, catalog, labels, tess, allocation, [b], nx, nt, floor)[0] / vol
    coarse = False
    if check:
        c2 = _band_quadrature(params, catalog, labels, tess, allocation, [b], max(1, nx // 2), max(1, nt // 2),
                              floor)[0] / vol
        coarse = bool(abs(c - c2) > 0.1 * max(abs(c), 1e-300))
        if coarse:
            warnings.warn("band-mass raster looks too coarse: halving it changed C_b by more than 10%",
                          RuntimeWarning, stacklevel=2)
    idx = np.arange(catalog.n_pre, catalog.n)
    if idx.size:
        s, _ = _scores(params, catalog, labels, tess, allocation, catalog.t[idx], catalog.x[idx], catalog.y[idx],
                       floor)
        ce = float(np.count_nonzero(np.abs(s) <= 2 * b)) / vol
    else:
        ce = 0.0
    h = params.kernel.horizon if np.isfinite(params.kernel.horizon) else dur
    R = params.kernel.radius or max(catalog.window.region[1] - catalog.window.region[0],
                                    catalog.window.region[3] - catalog.window.region[2])
    env = window_envelope(catalog, h, R, params)
    return BandReport(b, float(c), ce, env.K_win_hat, coarse, (nx, nt))


def band_curve(params, catalog, tess, allocation, bs, labelling=None, raster=(50, None), floor=1e-300):
    """``C_b`` on a grid of thresholds from a single raster pass (monotone by construction)."""
    labels = _full_labels(catalog, labelling)
    nx, nt = raster
    dur = catalog.window.t_end - catalog.t_star
    if nt is None:
        nt = max(1, int(np.ceil(dur / (params.kernel.horizon / 2))))
    bs = np.asarray(bs, dtype=float)
    vol = catalog.window.area * dur
    return _band_quadrature(params, catalog, labels, tess, allocation, bs, nx, nt, floor) / vol


__all__.append("band_curve")
