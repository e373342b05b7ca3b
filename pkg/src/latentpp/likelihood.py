"""Complete-data log-likelihood, compensators, gradients and per-flip updates.

All intensities are label induced: an event's label only ever enters the
intensity at strictly later times.  The post-``t_star`` window ``(start,
upto]`` defaults to ``(t_star, t_end]``; pre-``t_star`` events act as fixed,
control-labelled history.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import _full_labels, gate

__all__ = [
    "Labelling",
    "LogLikReport",
    "complete_data_loglik",
    "compensator",
    "cell_compensators",
    "loglik_gradient",
    "per_flip_delta",
    "event_intensities",
    "observed_loglik_enumerate",
    "observed_loglik_poisson",
    "loglik_batch",
]


@dataclass(frozen=True)
class Labelling:
    """Binary component assignment of the post-``t_star`` events."""

    bits: np.ndarray
    parent_catalog_id: Optional[str] = None

    def __post_init__(self):
        b = np.asarray(self.bits).ravel()
        if b.size and not np.all((b == 0) | (b == 1)):
            raise ValueError("labelling bits must be 0 or 1")
        object.__setattr__(self, "bits", b.astype(np.int8))

    def __len__(self):
        return self.bits.size

    @classmethod
    def from_catalog_truth(cls, catalog):
        return cls(catalog.truth, catalog.catalog_id)

    @classmethod
    def from_cells(cls, catalog, tess, allocation):
        """Label each post-``t_star`` event with its cell's treatment status."""
        cells = catalog.cells(tess)[catalog.n_pre:]
        return cls(allocation.z[cells], catalog.catalog_id)

    def hamming(self, other) -> int:
        other = np.asarray(getattr(other, "bits", other))
        if other.size != self.bits.size:
            raise ValueError("labellings have different lengths")
        return int(np.count_nonzero(self.bits != other))

    def prefix_hamming(self, other, catalog, u) -> int:
        """Disagreements among post-``t_star`` events with ``t <= u``."""
        other = np.asarray(getattr(other, "bits", other))
        if other.size != self.bits.size:
            raise ValueError("labellings have different lengths")
        m = int(np.searchsorted(catalog.t[catalog.n_pre:], u, side="right"))
        return int(np.count_nonzero(self.bits[:m] != other[:m]))

    def flipped(self, idx) -> "Labelling":
        b = self.bits.copy()
        b[idx] = 1 - b[idx]
        return Labelling(b, self.parent_catalog_id)


@dataclass
class LogLikReport:
    value: float
    event_terms: np.ndarray
    compensator: np.ndarray
    gradient: Optional[np.ndarray] = None
    n_clipped: int = 0
    names: list = field(default_factory=list)

    def reconstruct(self) -> float:
        return float(_pairwise_sum(self.event_terms) - self.compensator.sum())


def _pairwise_sum(a):
    # np.add.reduce already uses pairwise summation for contiguous float arrays
    return float(np.add.reduce(np.ascontiguousarray(a, dtype=float)))


# ---------------------------------------------------------------------------
# Pair index
# ---------------------------------------------------------------------------


class PairIndex:
    """Parent/child pairs within the kernel's truncation support.

    Pairs are grouped by child (``child_ptr``) and, through ``by_parent``,
    by parent (``parent_ptr``) so that a single event's forward cone is a
    contiguous slice.
    """

    def __init__(self, t, x, y, horizon, radius):
        n = t.size
        lo = np.searchsorted(t, t - horizon, side="left")
        counts = np.arange(n) - lo
        total = int(counts.sum())
        child = np.repeat(np.arange(n), counts)
        start = np.repeat(np.cumsum(counts) - counts, counts)
        parent = np.arange(total) - start + np.repeat(lo, counts)
        dt = t[child] - t[parent]
        dx = x[child] - x[parent]
        dy = y[child] - y[parent]
        keep = dt > 0
        if radius is not None:
            keep &= (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
        self.child = child[keep]
        self.parent = parent[keep]
        self.dt = dt[keep]
        self.dx = dx[keep]
        self.dy = dy[keep]
        self.child_ptr = np.concatenate([[0], np.cumsum(np.bincount(self.child, minlength=n))])
        self.by_parent = np.argsort(self.parent, kind="stable")
        self.parent_ptr = np.concatenate([[0], np.cumsum(np.bincount(self.parent, minlength=n))])

    def __len__(self):
        return self.child.size

    def for_children(self, idx):
        """Pair ids whose child is in ``idx`` plus, for each, its position in ``idx``."""
        idx = np.asarray(idx, dtype=int)
        s = self.child_ptr[idx]
        c = self.child_ptr[idx + 1] - s
        return _ranges(s, c), np.repeat(np.arange(idx.size), c)

    def for_parent(self, j):
        return self.by_parent[self.parent_ptr[j]:self.parent_ptr[j + 1]]


def _ranges(starts, counts):
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=int)
    off = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total) - off + np.repeat(starts, counts)


def pair_index(catalog, kernel) -> PairIndex:
    key = ("pairs", float(kernel.horizon), kernel.radius)
    cache = catalog._cache
    if key not in cache:
        cache[key] = PairIndex(catalog.t, catalog.x, catalog.y, kernel.horizon, kernel.radius)
    return cache[key]


# ---------------------------------------------------------------------------
# Core evaluation
# ---------------------------------------------------------------------------


def _bounds(catalog, start, upto):
    start = catalog.t_star if start is None else float(start)
    upto = catalog.window.t_end if upto is None else float(upto)
    if upto < start:
        raise ValueError("upto must not precede the start of the likelihood window")
    return start, upto


def _event_range(catalog, start, upto):
    i0 = int(np.searchsorted(catalog.t, start, side="right"))
    i1 = int(np.searchsorted(catalog.t, upto, side="right"))
    return i0, i1


def _base_background(params, catalog, tess, allocation, idx):
    """Background per unit ``mu`` at events ``idx``, shape (n, 2)."""
    cells = catalog.cells(tess)[idx]
    area = catalog.window.area
    g = gate(params, catalog.t[idx], cells, allocation, catalog.t_star)
    base = g * params.density_scale(area)
    if params.background is not None:
        for k in range(2):
            base[:, k] *= params.background.value(k, catalog.x[idx], catalog.y[idx])
    return base


def _check_labels(labels, lo, hi):
    if np.any(labels[lo:hi] < 0):
        raise ValueError("labels required for every event in the likelihood window")


def event_intensities(params, catalog, labels, tess, allocation, idx):
    """Label-induced ``(lambda_0, lambda_1)`` at catalog events ``idx``."""
    idx = np.atleast_1d(np.asarray(idx, dtype=int))
    kern = params.kernel
    lam = _base_background(params, catalog, tess, allocation, idx) * params.mu[None, :]
    if kern.is_null() or idx.size == 0:
        return lam
    pi = pair_index(catalog, kern)
    pids, owner = pi.for_children(idx)
    if pids.size:
        par = pi.parent[pids]
        lp = labels[par]
        if np.any(lp < 0):
            raise ValueError("labels required for every history event")
        mags = None if catalog.mag is None else catalog.mag[par]
        for k in range(2):
            g = kern.values(pi.dt[pids], pi.dx[pids], pi.dy[pids], mags, k, lp)
            lam[:, k] += np.bincount(owner, weights=g, minlength=idx.size)
    return lam


def _background_masses(params, catalog, tess, allocation, start, upto):
    """Per-cell background mass per unit ``mu`` over ``(start, upto]``, shape (2, J)."""
    ts = catalog.t_star
    s = params.density_scale(catalog.window.area)
    if params.background is not None:
        cm = params.background.cell_masses(tess)
    else:
        cm = np.stack([tess.areas, tess.areas])
    pre = max(0.0, min(upto, ts) - start)
    post = max(0.0, upto - max(start, ts))
    out = np.zeros((2, tess.n_cells))
    out[0] += pre * cm[0]
    if post > 0:
        if params.gating == "none":
            out += post * cm
        else:
            z = allocation.z
            out[0] += post * cm[0] * (z == 0)
            out[1] += post * cm[1] * (z == 1)
    return out * s


def _parent_range(catalog, kernel, start, upto):
    j0 = int(np.searchsorted(catalog.t, start - kernel.horizon, side="right"))
    j1 = int(np.searchsorted(catalog.t, upto, side="left"))
    return j0, j1


def _kernel_masses(params, catalog, labels, start, upto, grad=False):
    """Per-parent kernel masses over the window, each of shape (n_parents,) per component."""
    kern = params.kernel
    j0, j1 = _parent_range(catalog, kern, start, upto)
    js = np.arange(j0, j1)
    if js.size and np.any(labels[js] < 0):
        raise ValueError("labels required for every history event")
    region = catalog.window.region
    mags = None if catalog.mag is None else catalog.mag[js]
    out = []
    for k in range(2):
        out.append(
            kern.masses(catalog.t[js], catalog.x[js], catalog.y[js], mags, k, labels[js], start, upto, region, grad=grad)
        )
    return js, out


def _loglik(params, catalog, labels, tess, allocation, start, upto, grad=False, strict=False):
    kern = params.kernel
    i0, i1 = _event_range(catalog, start, upto)
    _check_labels(labels, i0, i1)
    idx = np.arange(i0, i1)
    base = _base_background(params, catalog, tess, allocation, idx)
    lab = labels[idx].astype(int)
    lam_own = base[np.arange(idx.size), lab] * params.mu[lab]
    pi = None
    if not kern.is_null() and idx.size:
        pi = pair_index(catalog, kern)
        p0, p1 = pi.child_ptr[i0], pi.child_ptr[i1]
        pids = np.arange(p0, p1)
        par = pi.parent[pids]
        if np.any(labels[par] < 0):
            raise ValueError("labels required for every history event")
        owner = pi.child[pids] - i0
        kc = lab[owner]
        lp = labels[par].astype(int)
        mags = None if catalog.mag is None else catalog.mag[par]
        if grad and hasattr(kern, "value_grads"):
            g, cols, d = kern.value_grads(pi.dt[pids], pi.dx[pids], pi.dy[pids], mags, kc, lp)
        else:
            g = kern.values(pi.dt[pids], pi.dx[pids], pi.dy[pids], mags, kc, lp)
        lam_own = lam_own + np.bincount(owner, weights=g, minlength=idx.size)
    floor = params.mu_min
    clipped = lam_own <= floor
    if strict and np.any(lam_own <= 0):
        bad = idx[lam_own <= 0][0]
        raise ValueError(f"log of nonpositive intensity at event {bad}")
    terms = np.log(np.maximum(lam_own, floor))

    bgm = _background_masses(params, catalog, tess, allocation, start, upto).sum(axis=1)
    js, km = _kernel_masses(params, catalog, labels, start, upto, grad=grad and hasattr(kern, "value_grads"))
    comp = np.empty(2)
    for k in range(2):
        mk = km[k][0] if isinstance(km[k], tuple) else km[k]
        comp[k] = params.mu[k] * bgm[k] + _pairwise_sum(mk)
    value = _pairwise_sum(terms) - comp.sum()
    if not grad:
        return value, terms, comp, None, int(clipped.sum())

    if not hasattr(kern, "value_grads"):
        return value, terms, comp, None, int(clipped.sum())
    gvec = np.zeros(params.dim)
    w = np.where(clipped, 0.0, 1.0 / np.maximum(lam_own, floor))
    for k in range(2):
        sel = lab == k
        gvec[k] += np.sum(w[sel] * base[sel, k]) - bgm[k]
    nk = kern.n_params
    if pi is not None and idx.size:
        wd = w[owner][:, None] * d
        gvec[2:] += np.bincount(cols.ravel(), weights=wd.ravel(), minlength=nk)
    for k in range(2):
        _, cols_k, d_k = km[k]
        if d_k.size:
            gvec[2:] -= np.bincount(cols_k.ravel(), weights=d_k.ravel(), minlength=nk)
    return value, terms, comp, gvec, int(clipped.sum())


def _fd_gradient(params, fn, rel_step=1e-5, free=None):
    v = params.vector()
    g = np.zeros(v.size)
    coords = range(v.size) if free is None else free
    for i in coords:
        h = rel_step * max(abs(v[i]), 1e-3)
        vp = v.copy()
        vm = v.copy()
        vp[i] += h
        vm[i] -= h
        g[i] = (fn(params.with_vector(vp)) - fn(params.with_vector(vm))) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def complete_data_loglik(params, catalog, labelling, allocation, tess, upto=None, start=None,
                         gradient=False, strict=False):
    """Complete-data log-likelihood ``l_r^[u]`` as a :class:`LogLikReport`."""
    labels = _full_labels(catalog, labelling)
    allocation.check(tess)
    start, upto = _bounds(catalog, start, upto)
    value, terms, comp, g, nclip = _loglik(params, catalog, labels, tess, allocation, start, upto,
                                           grad=gradient, strict=strict)
    if gradient and g is None:
        g = loglik_gradient(params, catalog, labelling, allocation, tess, upto=upto, start=start)
    return LogLikReport(value, terms, comp, g, nclip, params.names())


def loglik_value(params, catalog, labels, allocation, tess, start=None, upto=None):
    """Fast scalar path: ``labels`` covers every catalog event."""
    start, upto = _bounds(catalog, start, upto)
    return _loglik(params, catalog, labels, tess, allocation, start, upto)[0]


def loglik_value_grad(params, catalog, labels, allocation, tess, start=None, upto=None, free=None):
    start, upto = _bounds(catalog, start, upto)
    value, _, _, g, _ = _loglik(params, catalog, labels, tess, allocation, start, upto, grad=True)
    if g is None:
        g = _fd_gradient(
            params,
            lambda p: _loglik(p, catalog, labels, tess, allocation, start, upto)[0],
            free=free,
        )
    return value, g


def loglik_gradient(params, catalog, labelling, allocation, tess, upto=None, start=None):
    """Gradient of ``l_r^[u]`` with respect to the full parameter vector.

    Analytic for the exponential-Gaussian family; central differences
    (step ``1e-5`` times the coordinate scale) otherwise.
    """
    labels = _full_labels(catalog, labelling)
    start, upto = _bounds(catalog, start, upto)
    _, g = loglik_value_grad(params, catalog, labels, allocation, tess, start, upto)
    names = params.names()
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient entry for {names[bad[0]]}")
    return g


def compensator(params, catalog, labelling, allocation, tess, component, upto=None, start=None):
    """Integral of the label-induced intensity of one component over the window."""
    labels = _full_labels(catalog, labelling)
    start, upto = _bounds(catalog, start, upto)
    bgm = _background_masses(params, catalog, tess, allocation, start, upto).sum(axis=1)
    _, km = _kernel_masses(params, catalog, labels, start, upto)
    return float(params.mu[component] * bgm[component] + _pairwise_sum(km[component]))


def cell_compensators(params, catalog, labelling, allocation, tess, start=None, upto=None, raster=100):
    """Per-cell compensators, shape ``(2, J)``.

    Grid tessellations with the exponential-Gaussian family use exact
    per-cell error-function products; everything else distributes each
    parent's exact window mass over cells by midpoint quadrature on a
    ``raster`` x ``raster`` grid.
    """
    labels = _full_labels(catalog, labelling)
    start, upto = _bounds(catalog, start, upto)
    out = _background_masses(params, catalog, tess, allocation, start, upto) * params.mu[:, None]
    kern = params.kernel
    if kern.is_null():
        return out
    js, km = _kernel_masses(params, catalog, labels, start, upto)
    if js.size == 0:
        return out
    x, y = catalog.x[js], catalog.y[js]
    mags = None if catalog.mag is None else catalog.mag[js]
    if hasattr(tess, "rectangles"):
        return out + _grid_cell_masses(kern, tess, x, y, mags, labels[js], km, catalog.window.region)
    return out + _raster_cell_masses(kern, tess, x, y, mags, labels[js], km, catalog.window.region, raster)


def _grid_cell_masses(kern, tess, x, y, mags, labs, km, region):
    out = np.zeros((2, tess.n_cells))
    if kern.family == "expgauss":
        from .model import _gauss_interval

        xe, ye = tess.x_edges, tess.y_edges
        R = kern.R
        for k in range(2):
            al = kern.alpha[k, labs][:, None]
            xl = np.clip(xe[None, :-1], x[:, None] - R, x[:, None] + R) - x[:, None]
            xh = np.clip(xe[None, 1:], x[:, None] - R, x[:, None] + R) - x[:, None]
            yl = np.clip(ye[None, :-1], y[:, None] - R, y[:, None] + R) - y[:, None]
            yh = np.clip(ye[None, 1:], y[:, None] - R, y[:, None] + R) - y[:, None]
            Ix = _gauss_interval(al, xl, xh)
            Iy = _gauss_interval(al, yl, yh)
            tot = Ix.sum(axis=1) * Iy.sum(axis=1)
            scale = np.divide(km[k], tot, out=np.zeros_like(tot), where=tot > 0)
            out[k] = np.einsum("j,jr,jc->rc", scale, Iy, Ix).ravel()
        return out
    rects = tess.rectangles()
    for k in range(2):
        nz = km[k] > 0
        if not np.any(nz):
            continue
        tot = kern.spatial_fraction(x[nz], y[nz], mags[nz], region)
        scale = km[k][nz] / tot
        for j, (a0, a1, b0, b1) in enumerate(rects):
            frac = _rect_mass(kern, x[nz], y[nz], mags[nz], (a0, a1, b0, b1))
            out[k, j] = np.sum(scale * frac)
    return out


def _rect_mass(kern, x, y, mags, rect):
    """Power-law spatial mass of arbitrary rectangles by inclusion-exclusion of corners."""
    from .model import _corner_mass

    a0, a1, b0, b1 = rect
    d = np.broadcast_to(kern.scale(mags), x.shape).astype(float)

    def F(X, Y):
        ax = X - x
        by = Y - y
        return np.sign(ax) * np.sign(by) * _corner_mass(np.abs(ax), np.abs(by), d, kern.q, 64)

    return F(a1, b1) - F(a0, b1) - F(a1, b0) + F(a0, b0)


def _raster_cell_masses(kern, tess, x, y, mags, labs, km, region, n):
    x0, x1, y0, y1 = region
    xc = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    yc = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    X, Y = np.meshgrid(xc, yc)
    X = X.ravel()
    Y = Y.ravel()
    cell = tess.cell_index(X, Y)
    out = np.zeros((2, tess.n_cells))
    for k in range(2):
        for j in np.flatnonzero(km[k] > 0):
            dx = X - x[j]
            dy = Y - y[j]
            if kern.family == "expgauss":
                al = kern.alpha[k, labs[j]]
                w = np.exp(-al * (dx * dx + dy * dy)) * ((np.abs(dx) <= kern.R) & (np.abs(dy) <= kern.R))
            else:
                w = kern.spatial(dx, dy, mags[j])
            s = w.sum()
            if s > 0:
                out[k] += km[k][j] * np.bincount(cell, weights=w, minlength=tess.n_cells) / s
    return out


def per_flip_delta(params, catalog, labelling, flip_index, allocation, tess, upto=None, start=None):
    """Exact change in ``l_r^[u]`` when one post-``t_star`` label flips.

    Only the flipped event's own term, its forward cone of children and its
    own kernel mass are touched.
    """
    labels = _full_labels(catalog, labelling).copy()
    if not 0 <= flip_index < catalog.n_post:
        raise IndexError(f"flip index {flip_index} out of range for {catalog.n_post} post-t* events")
    start, upto = _bounds(catalog, start, upto)
    i = catalog.n_pre + int(flip_index)
    if catalog.t[i] > upto or catalog.t[i] <= start:
        return 0.0
    floor = params.mu_min
    old = int(labels[i])
    new = 1 - old
    lam_i = event_intensities(params, catalog, labels, tess, allocation, [i])[0]
    delta = np.log(max(lam_i[new], floor)) - np.log(max(lam_i[old], floor))

    kern = params.kernel
    if not kern.is_null():
        pi = pair_index(catalog, kern)
        pids = pi.for_parent(i)
        ch = pi.child[pids]
        keep = catalog.t[ch] <= upto
        pids, ch = pids[keep], ch[keep]
        if ch.size:
            lc = labels[ch].astype(int)
            if np.any(lc < 0):
                raise ValueError("labels required for every event in the likelihood window")
            lam_c = event_intensities(params, catalog, labels, tess, allocation, ch)[np.arange(ch.size), lc]
            m = None if catalog.mag is None else np.full(ch.size, catalog.mag[i])
            args = (pi.dt[pids], pi.dx[pids], pi.dy[pids], m)
            dg = kern.values(*args, lc, new) - kern.values(*args, lc, old)
            delta += np.sum(np.log(np.maximum(lam_c + dg, floor)) - np.log(np.maximum(lam_c, floor)))
        mag_i = None if catalog.mag is None else catalog.mag[i:i + 1]
        args = (catalog.t[i:i + 1], catalog.x[i:i + 1], catalog.y[i:i + 1], mag_i)
        region = catalog.window.region
        for k in range(2):
            dm = kern.masses(*args, k, new, start, upto, region) - kern.masses(*args, k, old, start, upto, region)
            delta -= float(dm[0])
    return float(delta)


# ---------------------------------------------------------------------------
# Observed-data likelihood (test oracles)
# ---------------------------------------------------------------------------


def observed_loglik_enumerate(params, catalog, allocation, tess, max_events=20):
    """``log sum_r exp(l_r)`` by brute force over all ``2^n`` labellings."""
    n = catalog.n_post
    if n > max_events:
        raise ValueError(f"enumeration limited to {max_events} events, catalog has {n}")
    vals = np.array(
        [
            complete_data_loglik(params, catalog, np.array(bits, dtype=np.int8), allocation, tess).value
            for bits in itertools.product((0, 1), repeat=n)
        ]
    )
    m = vals.max()
    return float(m + np.log(np.exp(vals - m).sum()))


def observed_loglik_poisson(params, catalog, allocation, tess):
    """Factorised mixture form, valid when the kernel is identically zero."""
    if not params.is_poisson():
        raise ValueError("factorised observed likelihood requires a Poisson model")
    start, upto = _bounds(catalog, None, None)
    i0, i1 = _event_range(catalog, start, upto)
    idx = np.arange(i0, i1)
    lam = _base_background(params, catalog, tess, allocation, idx) * params.mu[None, :]
    bgm = _background_masses(params, catalog, tess, allocation, start, upto).sum(axis=1)
    return float(np.sum(np.log(lam.sum(axis=1))) - np.dot(params.mu, bgm))


def loglik_batch(params, catalog, labellings, allocation, tess, start=None, upto=None):
    """Complete-data log-likelihoods for a stack of post-``t_star`` labellings.

    Poisson models are evaluated in one vectorised pass (the likelihood is
    affine in the label indicators); other models loop.
    """
    L = np.atleast_2d(np.asarray(labellings))
    start, upto = _bounds(catalog, start, upto)
    if params.is_poisson():
        i0, i1 = _event_range(catalog, start, upto)
        idx = np.arange(i0, i1)
        lam = np.maximum(_base_background(params, catalog, tess, allocation, idx) * params.mu[None, :], params.mu_min)
        ll = np.log(lam)
        bgm = _background_masses(params, catalog, tess, allocation, start, upto).sum(axis=1)
        sub = L[:, i0 - catalog.n_pre:i1 - catalog.n_pre]
        return ll[:, 0].sum() + sub @ (ll[:, 1] - ll[:, 0]) - np.dot(params.mu, bgm)
    base = np.asarray(catalog.label).copy()
    out = np.empty(L.shape[0])
    for b in range(L.shape[0]):
        base[catalog.n_pre:] = L[b]
        out[b] = _loglik(params, catalog, base, tess, allocation, start, upto)[0]
    return out
