"""Input checks shared by the estimators, the CLI and the public functions."""

from __future__ import annotations

import numbers

import numpy as np

from .model import Allocation, EventCatalog, GridTessellation, ModelParams, PolygonTessellation

__all__ = [
    "check_catalog",
    "check_tessellation",
    "check_allocation",
    "check_params",
    "check_positive",
    "check_fraction",
    "check_labels",
]


def check_catalog(X, require_post=True, require_truth=False) -> EventCatalog:
    if not isinstance(X, EventCatalog):
        raise TypeError(f"expected an EventCatalog, got {type(X).__name__}")
    if require_post and X.n_post == 0:
        raise ValueError("catalog has no post-t* events")
    if require_truth and not X.has_truth:
        raise ValueError("missing truth: the catalog carries no labels for post-t* events")
    return X


def check_tessellation(tess):
    if not isinstance(tess, (GridTessellation, PolygonTessellation)):
        raise TypeError(f"expected a tessellation, got {type(tess).__name__}")
    return tess


def check_allocation(z, tess) -> Allocation:
    check_tessellation(tess)
    if not isinstance(z, Allocation):
        z = Allocation(np.asarray(z))
    return z.check(tess)


def check_params(params, max_radius=1.0) -> ModelParams:
    """A :class:`ModelParams` whose branching matrix is subcritical."""
    if not isinstance(params, ModelParams):
        raise TypeError(f"expected ModelParams, got {type(params).__name__}")
    rho = float(np.max(np.abs(np.linalg.eigvals(params.kernel.branching_matrix()))))
    if rho >= max_radius:
        raise ValueError(f"spectral radius {rho:.4g} of the branching matrix is not below {max_radius}")
    return params


def check_positive(name, value, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number")
    if value < 0 or (strict and value == 0):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}")
    return float(value)


def check_fraction(name, value, closed_low=False):
    v = check_positive(name, value, strict=not closed_low)
    if v > 1:
        raise ValueError(f"{name} must lie in {'[' if closed_low else '('}0, 1]")
    return v


def check_labels(bits, catalog):
    bits = np.asarray(getattr(bits, "bits", bits))
    if bits.shape != (catalog.n_post,):
        raise ValueError(f"labelling has length {bits.size}, catalog has {catalog.n_post} post-t* events")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("labels must be 0 or 1")
    return bits.astype(np.int8)
