"""Complete-data maximum likelihood: M-steps and the naive/oracle fits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .likelihood import Labelling, loglik_value_grad
from .model import _full_labels
from .optimize import OptConfig, OptResult, maximize

__all__ = [
    "FitResult",
    "free_names",
    "default_bounds",
    "mstep",
    "fit_labelled",
    "fit_naive",
    "fit_oracle",
    "fit_pre_control",
    "naive_labelling",
]


@dataclass
class FitResult:
    params: object
    loglik: float
    opt: OptResult
    free: list
    labelling: Optional[Labelling] = None
    method: str = ""
    at_bounds: list = field(default_factory=list)

    @property
    def theta(self):
        return self.params.vector()

    def estimates(self) -> dict:
        v = self.params.vector()
        names = self.params.names()
        return {n: float(v[names.index(n)]) for n in self.free}


def free_names(params, structure=None) -> list:
    """Coordinates of ``theta`` estimated by default.

    ``structure="diagonal"`` (the default when both cross amplitudes are
    zero) leaves cross-excitation entries fixed; ``"full"`` frees every
    kernel entry.  ETAS shape parameters are shared by all entries.
    """
    kern = params.kernel
    amps = kern.vector()[:4].reshape(2, 2)
    if structure is None:
        structure = "diagonal" if amps[0, 1] == 0 and amps[1, 0] == 0 else "full"
    if structure not in ("diagonal", "full"):
        raise ValueError("structure must be 'diagonal' or 'full'")
    pairs = [(0, 0), (1, 1)] if structure == "diagonal" else [(0, 0), (0, 1), (1, 0), (1, 1)]
    names = ["mu0", "mu1"]
    for k, l in pairs:
        names += kern.entry_names(k, l)
    names += kern.shared_names()
    order = params.names()
    return sorted(names, key=order.index)


def default_bounds(params, names) -> np.ndarray:
    """Generous boxes around the template values."""
    v = params.vector()
    idx = params.index(names)
    out = np.empty((len(names), 2))
    for i, (n, j) in enumerate(zip(names, idx)):
        x = abs(v[j])
        if n.startswith("mu"):
            s = max(x, 1.0)
            out[i] = (1e-6 * s, 100.0 * s)
        elif n[0] in "KA":
            out[i] = (0.0, max(5.0, 20.0 * x))
        elif n.startswith("alpha_m") or n == "gamma":
            out[i] = (-5.0, 5.0)
        elif n in ("p", "q"):
            out[i] = (1.0 + 1e-3, 10.0)
        else:
            s = x if x > 0 else 1.0
            out[i] = (s / 100.0, s * 100.0)
    return out


def _scales(x, bounds):
    s = np.abs(x)
    fallback = np.where(np.isfinite(bounds[:, 1]), 0.1 * (bounds[:, 1] - bounds[:, 0]), 1.0)
    return np.where(s > 1e-8, s, fallback)


def mstep(template, catalog, labels, allocation, tess, names, opt: Optional[OptConfig] = None,
          start=None, upto=None, init=None) -> tuple:
    """Maximise ``l_r`` over the coordinates ``names``; the rest stay at ``template``.

    ``labels`` covers every catalog event.  Returns ``(params_hat, OptResult)``.
    """
    idx = template.index(names)
    base = template.vector()
    x0 = base[idx] if init is None else np.asarray(init, dtype=float)
    if opt is None:
        bounds = default_bounds(template, names)
        opt = OptConfig(bounds, scale=_scales(np.clip(x0, bounds[:, 0], bounds[:, 1]), bounds))
    x0 = np.clip(x0, opt.bounds[:, 0], opt.bounds[:, 1])
    if opt.scale is None:
        opt.scale = _scales(x0, opt.bounds)

    def objective(x):
        v = base.copy()
        v[idx] = x
        try:
            p = template.with_vector(v)
        except ValueError:
            return -np.inf, np.zeros_like(x)
        val, g = loglik_value_grad(p, catalog, labels, allocation, tess, start=start, upto=upto, free=idx)
        return val, g[idx]

    res = maximize(objective, opt, x0)
    v = base.copy()
    v[idx] = res.theta_hat
    return template.with_vector(v), res


def _flag_bounds(names, theta, bounds, tol=1e-6):
    width = bounds[:, 1] - bounds[:, 0]
    hit = []
    for n, x, (lo, hi), w in zip(names, theta, bounds, width):
        if n[0] in "KA" and lo == 0.0:
            continue  # a zero amplitude is a legitimate estimate
        if x - lo <= tol * w or hi - x <= tol * w:
            hit.append(n)
    return hit


def fit_labelled(init, catalog, labelling, allocation, tess, free: Optional[Sequence[str]] = None,
                 opt: Optional[OptConfig] = None, include_pre=True, method="labelled") -> FitResult:
    """Complete-data MLE under a fixed labelling.

    With ``include_pre`` the likelihood runs over the whole window, so
    pre-``t_star`` events count as control observations; otherwise over
    ``(t_star, T]`` with the pre-period as fixed history.
    """
    allocation.check(tess)
    if catalog.n_post == 0:
        raise ValueError("catalog has no post-t* events")
    labels = _full_labels(catalog, labelling)
    names = free_names(init) if free is None else list(free)
    start = catalog.window.t_start if include_pre else None
    params, res = mstep(init, catalog, labels, allocation, tess, names, opt=opt, start=start)
    bounds = default_bounds(init, names) if opt is None else opt.bounds
    hit = _flag_bounds(names, res.theta_hat, bounds)
    if hit or catalog.n < 10:
        warnings.warn(
            f"{method} fit on {catalog.n} events: estimates at their bounds for {hit}" if hit
            else f"{method} fit on only {catalog.n} events; estimates are poorly determined",
            RuntimeWarning,
            stacklevel=2,
        )
    lab = Labelling(labels[catalog.n_pre:], catalog.catalog_id)
    return FitResult(params, res.loglik, res, names, lab, method, hit)


def naive_labelling(catalog, tess, allocation) -> Labelling:
    """Each post-``t_star`` event takes its cell's treatment status."""
    return Labelling.from_cells(catalog, tess, allocation)


def fit_naive(catalog, tess, allocation, init, free=None, opt=None, include_pre=True) -> FitResult:
    return fit_labelled(init, catalog, naive_labelling(catalog, tess, allocation), allocation, tess,
                        free, opt, include_pre, method="naive")


def fit_oracle(catalog, tess, allocation, init, free=None, opt=None, include_pre=True) -> FitResult:
    if not catalog.has_truth or catalog.n_post == 0 and catalog.n == 0:
        raise ValueError("missing truth: oracle fit needs the true post-t* labels")
    return fit_labelled(init, catalog, Labelling(catalog.truth), allocation, tess, free, opt, include_pre,
                        method="oracle")


def fit_pre_control(catalog, tess, allocation, init, names=None, opt=None) -> FitResult:
    """MLE of the control-only parameters from the pre-``t_star`` period alone."""
    if catalog.n_pre == 0:
        raise ValueError("no pre-t* events to anchor the control parameters")
    names = ["mu0"] + init.kernel.control_only_names() if names is None else list(names)
    labels = np.asarray(catalog.label).copy()
    labels[catalog.n_pre:] = 0  # never read: the window ends at t_star
    params, res = mstep(init, catalog, labels, allocation, tess, names, opt=opt,
                        start=catalog.window.t_start, upto=catalog.t_star)
    return FitResult(params, res.loglik, res, names, None, "pre-control")
