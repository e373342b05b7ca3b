"""Scikit-learn style estimators around the fitting procedures.

``fit`` takes an :class:`~latentpp.model.EventCatalog` as ``X``; the
design (tessellation and allocation) and the model template are
constructor parameters, so ``get_params`` / ``set_params`` / ``clone``
behave as usual.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .estimands import EstimandRequest, estimate
from .fitting import fit_labelled, fit_naive, fit_oracle
from .hardem import HardEmConfig, greedy_labels, run_hard_em
from .likelihood import Labelling, loglik_value
from .model import _full_labels
from .sem import SemConfig, run_sem
from .validation import check_allocation, check_catalog, check_labels, check_params, check_tessellation

__all__ = [
    "NaiveEstimator",
    "OracleEstimator",
    "SemEstimator",
    "HardEmEstimator",
]


class _LatentLabelBase(BaseEstimator):
    """Shared ``predict`` / ``score`` / ``effect`` for fitted estimators."""

    def _check_design(self):
        tess = check_tessellation(self.tess)
        alloc = check_allocation(self.allocation, tess)
        if self.template is None:
            raise ValueError("template parameters are required")
        check_params(self.template)
        return tess, alloc

    def _finish(self, X, params, labelling, loglik):
        self.params_ = params
        self.labelling_ = labelling
        self.loglik_ = float(loglik)
        self.catalog_id_ = X.catalog_id
        self.theta_ = params.vector()
        return self

    def predict(self, X):
        """Predictable greedy labels of the post-``t_star`` events of ``X``.

        For the training catalog the fitted labelling is returned.
        """
        check_is_fitted(self, "params_")
        X = check_catalog(X)
        if X.catalog_id == self.catalog_id_ and self.labelling_ is not None:
            return self.labelling_.bits.copy()
        tess, alloc = self._check_design()
        return greedy_labels(self.params_, X, tess, alloc).bits

    def score(self, X, y=None):
        """Post-``t_star`` complete-data log-likelihood at ``params_`` under labels ``y`` (default ``predict(X)``)."""
        check_is_fitted(self, "params_")
        X = check_catalog(X)
        tess, alloc = self._check_design()
        bits = self.predict(X) if y is None else check_labels(y, X)
        return loglik_value(self.params_, X, _full_labels(X, bits), alloc, tess)

    def effect(self, request: EstimandRequest, window, t_star):
        """Plug-in estimand at the fitted parameters."""
        check_is_fitted(self, "params_")
        tess, _ = self._check_design()
        return estimate(self.params_, tess, window, t_star, request)


class NaiveEstimator(_LatentLabelBase):
    """Complete-data MLE with each event labelled by its cell's treatment status."""

    def __init__(self, tess=None, allocation=None, template=None, free=None, include_pre=True):
        self.tess = tess
        self.allocation = allocation
        self.template = template
        self.free = free
        self.include_pre = include_pre

    def fit(self, X, y=None):
        X = check_catalog(X)
        tess, alloc = self._check_design()
        res = fit_naive(X, tess, alloc, self.template, free=self.free, include_pre=self.include_pre)
        self.bound_hits_ = res.at_bounds
        return self._finish(X, res.params, res.labelling, res.loglik)


class OracleEstimator(_LatentLabelBase):
    """Complete-data MLE at the true labels (``y`` or the catalog's own)."""

    def __init__(self, tess=None, allocation=None, template=None, free=None, include_pre=True):
        self.tess = tess
        self.allocation = allocation
        self.template = template
        self.free = free
        self.include_pre = include_pre

    def fit(self, X, y=None):
        tess, alloc = self._check_design()
        if y is not None:
            X = check_catalog(X)
            res = fit_labelled(self.template, X, Labelling(check_labels(y, X), X.catalog_id), alloc, tess,
                               self.free, include_pre=self.include_pre, method="oracle")
        else:
            X = check_catalog(X, require_truth=True)
            res = fit_oracle(X, tess, alloc, self.template, free=self.free, include_pre=self.include_pre)
        self.bound_hits_ = res.at_bounds
        return self._finish(X, res.params, res.labelling, res.loglik)


class SemEstimator(_LatentLabelBase):
    """Stochastic EM with the discrepancy-guided proposal."""

    def __init__(self, tess=None, allocation=None, template=None, config=None):
        self.tess = tess
        self.allocation = allocation
        self.template = template
        self.config = config

    def fit(self, X, y=None):
        X = check_catalog(X)
        tess, alloc = self._check_design()
        cfg = SemConfig() if self.config is None else self.config
        res = run_sem(X, tess, alloc, self.template, cfg, labelling=y)
        self.trace_ = res.trace
        self.converged_ = res.converged
        return self._finish(X, res.params, res.labelling, res.loglik)


class HardEmEstimator(_LatentLabelBase):
    """Predictable blockwise penalised hard-EM.

    ``y`` (true labels), when given, fills the error accounting in ``trace_``.
    """

    def __init__(self, tess=None, allocation=None, template=None, config=None):
        self.tess = tess
        self.allocation = allocation
        self.template = template
        self.config = config

    def fit(self, X, y=None):
        X = check_catalog(X)
        tess, alloc = self._check_design()
        cfg = HardEmConfig() if self.config is None else self.config
        truth = None if y is None else check_labels(y, X)
        params, lab, trace = run_hard_em(X, tess, alloc, self.template, cfg, truth=truth)
        self.trace_ = trace
        ll = loglik_value(params, X, _full_labels(X, lab), alloc, tess)
        return self._finish(X, params, lab, ll)
