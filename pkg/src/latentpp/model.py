"""Domain types, kernel families and conditional-intensity evaluation.

The observed process is the superposition ``N = N_0 + N_1`` of a control
component (label 0) and a treatment component (label 1) living on a
rectangular study region.  Cells of a fixed tessellation are allocated to
one of the two regimes; the allocation gates where each component's
immigrants (background events) may occur, while the triggering kernels
are regime independent.
"""

from __future__ import annotations

import enum
import hashlib
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "SpaceTimePoint",
    "Window",
    "EventCatalog",
    "GridTessellation",
    "PolygonTessellation",
    "Allocation",
    "BackgroundField",
    "ExpGaussKernel",
    "EtasKernel",
    "ModelParams",
    "Decision",
    "MarginViolation",
    "evaluate_intensity",
    "intensities_at",
    "oracle_score",
    "classify_decisive",
]


class MarginViolation(ValueError):
    """Raised when a component intensity vanishes where a log ratio is needed."""


# ---------------------------------------------------------------------------
# Points, windows, catalogs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceTimePoint:
    t: float
    x: float
    y: float
    mag: Optional[float] = None
    label: Optional[int] = None

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("event time must be finite")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class Window:
    """Study window ``(t_start, t_end] x [x_min, x_max] x [y_min, y_max]``."""

    t_start: float
    t_end: float
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("Window requires t_start < t_end")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("Window region must have positive area")

    @classmethod
    def square(cls, t_start, t_end, side, origin=0.0):
        return cls(t_start, t_end, origin, origin + side, origin, origin + side)

    @property
    def region(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def volume(self) -> float:
        return self.duration * self.area

    def contains_xy(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)


class EventCatalog:
    """Time-ordered events split at the treatment time ``t_star``.

    Columns are stored as numpy arrays sorted by time (stable, so ties keep
    their insertion order).  ``label`` uses -1 for "unknown"; pre-``t_star``
    events are always control-labelled.  ``row`` keeps the position each
    event had in the input, which the loaders use for error messages.
    """

    def __init__(self, t, x, y, t_star, window, mag=None, label=None, row=None):
        t = np.asarray(t, dtype=float).ravel()
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        n = t.size
        if x.size != n or y.size != n:
            raise ValueError("t, x and y must have the same length")
        if mag is not None:
            mag = np.asarray(mag, dtype=float).ravel()
            if mag.size != n:
                raise ValueError("mag has the wrong length")
        if label is None:
            label = np.full(n, -1, dtype=np.int8)
        else:
            label = np.asarray(label).ravel().astype(np.int8)
            if label.size != n:
                raise ValueError("label has the wrong length")
            if np.any((label != -1) & (label != 0) & (label != 1)):
                raise ValueError("labels must be 0, 1 or -1 (unknown)")
        row = np.arange(n) if row is None else np.asarray(row, dtype=int).ravel()
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            bad = row[~(np.isfinite(t) & np.isfinite(x) & np.isfinite(y))]
            raise ValueError(f"non-finite coordinates in rows {bad.tolist()}")
        if not window.t_start <= t_star < window.t_end:
            raise ValueError("t_star must lie inside [t_start, t_end)")
        outside = ~window.contains_xy(x, y) | (t <= window.t_start) | (t > window.t_end)
        if np.any(outside):
            raise ValueError(f"{int(outside.sum())} events fall outside the window")

        order = np.argsort(t, kind="stable")
        self.t = t[order]
        self.x = x[order]
        self.y = y[order]
        self.mag = None if mag is None else mag[order]
        lab = label[order].copy()
        self.row = row[order]
        self.t_star = float(t_star)
        self.window = window
        self.n_pre = int(np.searchsorted(self.t, self.t_star, side="right"))
        lab[: self.n_pre] = 0
        self.label = lab
        for arr in (self.t, self.x, self.y, self.label, self.row):
            arr.flags.writeable = False
        if self.mag is not None:
            self.mag.flags.writeable = False
        self._cache = {}

    @classmethod
    def from_points(cls, points: Sequence[SpaceTimePoint], t_star, window):
        pts = list(points)
        mags = [p.mag for p in pts]
        has_mag = any(m is not None for m in mags)
        return cls(
            [p.t for p in pts],
            [p.x for p in pts],
            [p.y for p in pts],
            t_star,
            window,
            mag=[np.nan if m is None else m for m in mags] if has_mag else None,
            label=[-1 if p.label is None else p.label for p in pts],
        )

    def __len__(self):
        return self.t.size

    def __repr__(self):
        return f"EventCatalog(n={len(self)}, n_pre={self.n_pre}, t_star={self.t_star})"

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def n_post(self) -> int:
        return self.n - self.n_pre

    @property
    def post_slice(self):
        return slice(self.n_pre, self.n)

    @property
    def has_truth(self) -> bool:
        return self.n_post == 0 or bool(np.all(self.label[self.n_pre:] >= 0))

    @property
    def truth(self) -> "np.ndarray":
        if not self.has_truth:
            raise ValueError("catalog carries no complete post-t* labels")
        return self.label[self.n_pre:].copy()

    def point(self, i) -> SpaceTimePoint:
        lab = int(self.label[i])
        return SpaceTimePoint(
            float(self.t[i]),
            float(self.x[i]),
            float(self.y[i]),
            None if self.mag is None else float(self.mag[i]),
            None if lab < 0 else lab,
        )

    @property
    def pre(self):
        return [self.point(i) for i in range(self.n_pre)]

    @property
    def post(self):
        return [self.point(i) for i in range(self.n_pre, self.n)]

    @property
    def catalog_id(self) -> str:
        if "id" not in self._cache:
            h = hashlib.sha1()
            for arr in (self.t, self.x, self.y):
                h.update(np.ascontiguousarray(arr).tobytes())
            if self.mag is not None:
                h.update(self.mag.tobytes())
            h.update(repr((self.t_star, self.window)).encode())
            self._cache["id"] = h.hexdigest()[:16]
        return self._cache["id"]

    def with_labels(self, post_labels) -> "EventCatalog":
        """Copy of the catalog with the given post-``t_star`` labels."""
        post_labels = np.asarray(post_labels).astype(np.int8)
        if post_labels.size != self.n_post:
            raise ValueError("labelling length does not match post-t* event count")
        lab = np.asarray(self.label).copy()
        lab[self.n_pre:] = post_labels
        out = EventCatalog.__new__(EventCatalog)
        out.__dict__.update(self.__dict__)
        out.label = lab
        out.label.flags.writeable = False
        out._cache = dict(self._cache)  # id and cell indices do not depend on labels
        return out

    def without_labels(self) -> "EventCatalog":
        return self.with_labels(np.full(self.n_post, -1, dtype=np.int8))

    def cells(self, tess) -> np.ndarray:
        key = ("cells", id(tess))
        if key not in self._cache:
            self._cache[key] = (tess, tess.cell_index(self.x, self.y))
        return self._cache[key][1]


# ---------------------------------------------------------------------------
# Tessellations and allocations
# ---------------------------------------------------------------------------


class GridTessellation:
    """Regular ``nx`` by ``ny`` grid over a rectangular region.

    Cell ``j = iy * nx + ix``.
    """

    def __init__(self, region, nx, ny):
        x0, x1, y0, y1 = map(float, region)
        if not (x0 < x1 and y0 < y1):
            raise ValueError("region must have positive area")
        if int(nx) < 1 or int(ny) < 1:
            raise ValueError("grid needs at least one cell per axis")
        self.region = (x0, x1, y0, y1)
        self.nx = int(nx)
        self.ny = int(ny)
        self.x_edges = np.linspace(x0, x1, self.nx + 1)
        self.y_edges = np.linspace(y0, y1, self.ny + 1)

    def __repr__(self):
        return f"GridTessellation(region={self.region}, nx={self.nx}, ny={self.ny})"

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def areas(self) -> np.ndarray:
        dx = np.diff(self.x_edges)
        dy = np.diff(self.y_edges)
        return np.outer(dy, dx).ravel()

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.region
        return (x1 - x0) * (y1 - y0)

    def cell_index(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        x0, x1, y0, y1 = self.region
        ix = np.floor((x - x0) / (x1 - x0) * self.nx).astype(int)
        iy = np.floor((y - y0) / (y1 - y0) * self.ny).astype(int)
        ix = np.clip(ix, 0, self.nx - 1)
        iy = np.clip(iy, 0, self.ny - 1)
        out = iy * self.nx + ix
        inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return np.where(inside, out, -1)

    def rectangles(self) -> np.ndarray:
        """Cell bounds as an array of rows ``(x_lo, x_hi, y_lo, y_hi)``."""
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        ix = ix.ravel()
        iy = iy.ravel()
        return np.column_stack(
            [self.x_edges[ix], self.x_edges[ix + 1], self.y_edges[iy], self.y_edges[iy + 1]]
        )

    def to_spec(self) -> dict:
        return {"grid": {"nx": self.nx, "ny": self.ny}}


class PolygonTessellation:
    """Planar polygon cells (shapely geometries) partitioning a rectangle."""

    def __init__(self, region, polygons, tol=1e-6):
        import shapely
        from shapely.geometry import Polygon, box

        x0, x1, y0, y1 = map(float, region)
        self.region = (x0, x1, y0, y1)
        polys = [p if hasattr(p, "area") else Polygon(p) for p in polygons]
        if not polys:
            raise ValueError("a tessellation needs at least one cell")
        for j, p in enumerate(polys):
            if not p.is_valid or p.area <= 0:
                raise ValueError(f"cell {j} is not a valid polygon with positive area")
        total = (x1 - x0) * (y1 - y0)
        tree = shapely.STRtree(polys)
        left, right = tree.query(polys, predicate="intersects")
        for a, b in zip(left, right):
            if a < b and polys[a].intersection(polys[b]).area > 1e-9 * total:
                raise ValueError(f"cells {a} and {b} overlap")
        union = shapely.union_all(polys)
        gap = box(x0, y0, x1, y1).symmetric_difference(union).area
        if gap > tol * total:
            raise ValueError(f"cells fail to cover the region (mismatch area fraction {gap / total:.3g})")
        self.polygons = polys
        self._areas = np.array([p.area for p in polys])

    def __repr__(self):
        return f"PolygonTessellation(n_cells={self.n_cells})"

    @property
    def n_cells(self) -> int:
        return len(self.polygons)

    @property
    def areas(self) -> np.ndarray:
        return self._areas.copy()

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.region
        return (x1 - x0) * (y1 - y0)

    def cell_index(self, x, y) -> np.ndarray:
        import shapely

        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.full(x.shape, -1, dtype=int)
        for j, p in enumerate(self.polygons):
            hit = (out < 0) & shapely.intersects_xy(p, x, y)
            out[hit] = j
        return out

    def to_spec(self) -> dict:
        return {"polygons": [list(map(list, p.exterior.coords)) for p in self.polygons]}


@dataclass(frozen=True)
class Allocation:
    """Binary per-cell treatment vector."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z).ravel()
        if z.size and not np.all((z == 0) | (z == 1)):
            raise ValueError("allocation entries must be 0 or 1")
        object.__setattr__(self, "z", z.astype(np.int8))

    def __len__(self):
        return self.z.size

    def __eq__(self, other):
        return isinstance(other, Allocation) and np.array_equal(self.z, other.z)

    def __hash__(self):
        return hash(self.z.tobytes())

    def check(self, tess):
        if self.z.size != tess.n_cells:
            raise ValueError(f"allocation has length {self.z.size}, tessellation has {tess.n_cells} cells")
        return self

    @classmethod
    def all_control(cls, n_cells):
        return cls(np.zeros(n_cells, dtype=np.int8))

    @classmethod
    def all_treated(cls, n_cells):
        return cls(np.ones(n_cells, dtype=np.int8))

    @classmethod
    def random(cls, n_cells, fraction=0.5, seed=0):
        """Exactly ``round(fraction * n_cells)`` treated cells, chosen at random."""
        rng = np.random.default_rng(seed)
        z = np.zeros(n_cells, dtype=np.int8)
        z[rng.choice(n_cells, int(round(fraction * n_cells)), replace=False)] = 1
        return cls(z)

    @classmethod
    def observed(cls, tess, treated_cells):
        """Allocation from the list of cells recorded as treated."""
        z = np.zeros(tess.n_cells, dtype=np.int8)
        z[np.asarray(list(treated_cells), dtype=int)] = 1
        return cls(z)

    def with_cell(self, j, value) -> "Allocation":
        z = self.z.copy()
        z[j] = value
        return Allocation(z)


# ---------------------------------------------------------------------------
# Background field
# ---------------------------------------------------------------------------


class BackgroundField:
    """Piecewise-constant background weights ``W_k(x, y)`` on a raster.

    ``weights`` has shape ``(2, ny, nx)``.  After :meth:`normalized` the
    raster mass of each component inside every cell equals the cell area,
    so gated background masses depend on cell areas only.
    """

    def __init__(self, weights, region):
        w = np.asarray(weights, dtype=float)
        if w.ndim == 2:
            w = np.stack([w, w])
        if w.ndim != 3 or w.shape[0] != 2:
            raise ValueError("weights must have shape (ny, nx) or (2, ny, nx)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("background weights must be finite and nonnegative")
        self.weights = w
        self.region = tuple(map(float, region))
        x0, x1, y0, y1 = self.region
        self.ny, self.nx = w.shape[1:]
        self.pixel_area = (x1 - x0) * (y1 - y0) / (self.nx * self.ny)

    def pixel_centers(self):
        x0, x1, y0, y1 = self.region
        xc = x0 + (np.arange(self.nx) + 0.5) * (x1 - x0) / self.nx
        yc = y0 + (np.arange(self.ny) + 0.5) * (y1 - y0) / self.ny
        return np.meshgrid(xc, yc)

    def normalized(self, tess) -> "BackgroundField":
        """Rescale so each cell's raster mass equals its area, per component."""
        X, Y = self.pixel_centers()
        cell = tess.cell_index(X.ravel(), Y.ravel()).reshape(X.shape)
        areas = tess.areas
        w = self.weights.copy()
        for k in range(2):
            mass = np.bincount(cell.ravel(), weights=w[k].ravel(), minlength=tess.n_cells) * self.pixel_area
            if np.any(mass <= 0):
                empty = np.flatnonzero(mass <= 0)
                raise ValueError(f"raster too coarse or zero weight in cells {empty.tolist()[:10]}")
            w[k] *= (areas / mass)[cell]
        return BackgroundField(w, self.region)

    def cell_masses(self, tess) -> np.ndarray:
        X, Y = self.pixel_centers()
        cell = tess.cell_index(X.ravel(), Y.ravel())
        return np.stack(
            [np.bincount(cell, weights=self.weights[k].ravel(), minlength=tess.n_cells) * self.pixel_area for k in range(2)]
        )

    def value(self, k, x, y) -> np.ndarray:
        x0, x1, y0, y1 = self.region
        ix = np.clip(np.floor((np.asarray(x) - x0) / (x1 - x0) * self.nx).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor((np.asarray(y) - y0) / (y1 - y0) * self.ny).astype(int), 0, self.ny - 1)
        return self.weights[k][iy, ix]

    def sup(self, k) -> float:
        return float(self.weights[k].max())


# ---------------------------------------------------------------------------
# Kernel families
# ---------------------------------------------------------------------------

_PAIRS = ("00", "01", "10", "11")


def _mat(v):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.full((2, 2), float(a))
    return a.reshape(2, 2).copy()


def _gauss_interval(alpha, lo, hi):
    """Integral of ``exp(-alpha v^2)`` over ``[lo, hi]``."""
    s = np.sqrt(alpha)
    return 0.5 * np.sqrt(np.pi / alpha) * (erf(s * hi) - erf(s * lo))


@dataclass(frozen=True)
class ExpGaussKernel:
    """Exponential-in-time, Gaussian-in-space triggering kernels.

    ``g_kl(dt, dx, dy) = K_kl * c_kl * exp(-beta_kl dt - alpha_kl (dx^2 + dy^2))``
    on ``0 < dt <= h``, ``|dx| <= R``, ``|dy| <= R``, where ``c_kl = 1`` for
    the raw form and ``c_kl = beta_kl alpha_kl / pi`` when ``normalized``
    (then ``K_kl`` is the untruncated branching ratio).  Row ``k`` is the
    excited component, column ``l`` the parent's label.
    """

    K: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    h: Optional[float] = None
    R: Optional[float] = None
    normalized: bool = False

    def __post_init__(self):
        K, beta, alpha = _mat(self.K), _mat(self.beta), _mat(self.alpha)
        if np.any(K < 0):
            raise ValueError("kernel amplitudes must be nonnegative")
        if np.any(beta <= 0) or np.any(alpha <= 0):
            raise ValueError("beta and alpha must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        h = 5.0 / float(beta.min()) if self.h is None else float(self.h)
        R = 5.0 / math.sqrt(float(alpha.min())) if self.R is None else float(self.R)
        if h <= 0 or R <= 0:
            raise ValueError("truncation lengths must be positive")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "R", R)

    family = "expgauss"

    @classmethod
    def diagonal(cls, K_control, K_treated, beta, alpha, **kw):
        """No cross-excitation: each component excites only itself."""
        K = np.diag([K_control, K_treated])
        return cls(K, _diag_fill(beta), _diag_fill(alpha), **kw)

    @property
    def horizon(self) -> float:
        return self.h

    @property
    def radius(self) -> Optional[float]:
        return self.R

    @property
    def n_params(self) -> int:
        return 12

    def names(self):
        return [f"{p}{s}" for p in ("K", "beta", "alpha") for s in _PAIRS]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.K.ravel(), self.beta.ravel(), self.alpha.ravel()])

    def with_vector(self, v) -> "ExpGaussKernel":
        v = np.asarray(v, dtype=float)
        return replace(self, K=v[0:4], beta=v[4:8], alpha=v[8:12])

    def amplitude_names(self):
        return [f"K{s}" for s in _PAIRS]

    def entry_names(self, k, l):
        return [f"K{k}{l}", f"beta{k}{l}", f"alpha{k}{l}"]

    def shared_names(self):
        return []

    def is_null(self) -> bool:
        return not np.any(self.K > 0)

    def _c(self):
        if self.normalized:
            return self.beta * self.alpha / np.pi
        return np.ones((2, 2))

    def values(self, dt, dx, dy, mag, k, l):
        """Kernel values for pairs with excited component ``k`` and parent label ``l``."""
        K = self.K[k, l]
        b = self.beta[k, l]
        a = self.alpha[k, l]
        c = self._c()[k, l]
        inside = (dt > 0) & (dt <= self.h) & (np.abs(dx) <= self.R) & (np.abs(dy) <= self.R)
        return np.where(inside, K * c * np.exp(-b * dt - a * (dx * dx + dy * dy)), 0.0)

    def value_grads(self, dt, dx, dy, mag, k, l):
        """Values plus derivatives w.r.t. ``(K_kl, beta_kl, alpha_kl)``.

        Returns ``(g, cols, d)`` with ``cols`` the kernel-vector positions of
        the three touched parameters and ``d`` their partials, both ``(n, 3)``.
        """
        K = self.K[k, l]
        b = self.beta[k, l]
        a = self.alpha[k, l]
        rho2 = dx * dx + dy * dy
        inside = (dt > 0) & (dt <= self.h) & (np.abs(dx) <= self.R) & (np.abs(dy) <= self.R)
        e = np.where(inside, np.exp(-b * dt - a * rho2), 0.0)
        if self.normalized:
            c = b * a / np.pi
            dc_db = a / np.pi
            dc_da = b / np.pi
        else:
            c = np.ones_like(e)
            dc_db = 0.0
            dc_da = 0.0
        g = K * c * e
        idx = 2 * np.asarray(k) + np.asarray(l)
        cols = np.stack(np.broadcast_arrays(idx, idx + 4, idx + 8), axis=-1)
        d = np.stack([c * e, K * e * (dc_db - c * dt), K * e * (dc_da - c * rho2)], axis=-1)
        return g, cols, d

    def masses(self, t, x, y, mag, k, l, a, u, region, grad=False):
        """Integral of each parent's kernel over ``(a, u] x region``."""
        x0, x1, y0, y1 = region
        K = self.K[k, l]
        b = self.beta[k, l]
        al = self.alpha[k, l]
        lo = np.clip(a - t, 0.0, self.h)
        hi = np.clip(u - t, 0.0, self.h)
        hi = np.maximum(hi, lo)
        elo = np.exp(-b * lo)
        ehi = np.exp(-b * hi)
        T = (elo - ehi) / b
        xl = np.maximum(x0, x - self.R) - x
        xh = np.minimum(x1, x + self.R) - x
        yl = np.maximum(y0, y - self.R) - y
        yh = np.minimum(y1, y + self.R) - y
        Ix = _gauss_interval(al, xl, xh)
        Iy = _gauss_interval(al, yl, yh)
        if self.normalized:
            c = b * al / np.pi
        else:
            c = np.ones_like(T)
        m = K * c * T * Ix * Iy
        if not grad:
            return m
        dT = (-lo * elo + hi * ehi) / b - T / b
        dIx = (xh * np.exp(-al * xh * xh) - xl * np.exp(-al * xl * xl)) / (2 * al) - Ix / (2 * al)
        dIy = (yh * np.exp(-al * yh * yh) - yl * np.exp(-al * yl * yl)) / (2 * al) - Iy / (2 * al)
        S = Ix * Iy
        dS = dIx * Iy + Ix * dIy
        if self.normalized:
            dc_db = al / np.pi
            dc_da = b / np.pi
        else:
            dc_db = 0.0
            dc_da = 0.0
        idx = 2 * np.asarray(k) + np.asarray(l)
        cols = np.stack(np.broadcast_arrays(idx, idx + 4, idx + 8), axis=-1)
        d = np.stack(
            [c * T * S, K * S * (dc_db * T + c * dT), K * T * (dc_da * S + c * dS)], axis=-1
        )
        return m, cols, d

    def sup(self, mag=None) -> np.ndarray:
        """Sup-norm of each kernel entry, shape ``(2, 2)``."""
        return self.K * self._c()

    def branching_matrix(self, truncated=True) -> np.ndarray:
        c = self._c()
        if not truncated:
            return self.K * c / self.beta * (np.pi / self.alpha)
        t_mass = (1 - np.exp(-self.beta * self.h)) / self.beta
        s_mass = (np.sqrt(np.pi / self.alpha) * erf(np.sqrt(self.alpha) * self.R)) ** 2
        return self.K * c * t_mass * s_mass

    def control_only_names(self):
        return self.entry_names(0, 0)

    def to_dict(self) -> dict:
        return {
            "family": "expgauss",
            "K": self.K.tolist(),
            "beta": self.beta.tolist(),
            "alpha": self.alpha.tolist(),
            "h": self.h,
            "R": self.R,
            "normalized": self.normalized,
        }


def _diag_fill(v):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return np.full((2, 2), float(a))
    if a.size == 2:
        # off-diagonal entries are inert when K_kl = 0; give them the row value
        return np.array([[a[0], a[0]], [a[1], a[1]]])
    return a.reshape(2, 2)


@dataclass(frozen=True)
class EtasKernel:
    """Marked ETAS kernels: Omori-Utsu time law times power-law space law.

    ``g_kl = A_kl exp(alpha_m_kl (m - m0)) * omori(dt) * f(r | m)`` with
    ``omori(dt) = (p-1)/c (1+dt/c)^-p / (1 - (1+t_trunc/c)^(1-p))`` on
    ``(0, t_trunc]`` and ``f(r|m) = (q-1)/(pi d) (1 + r^2/d)^-q``,
    ``d = D0 exp(gamma (m - m0))``.  Space is not truncated.
    """

    A: np.ndarray
    alpha_m: np.ndarray
    c: float
    p: float
    D0: float
    gamma: float
    q: float
    m0: float = 0.0
    t_trunc: Optional[float] = None
    quad_nodes: int = 32
    quad_tol: float = 1e-7

    family = "etas"

    def __post_init__(self):
        A, am = _mat(self.A), _mat(self.alpha_m)
        if np.any(A < 0):
            raise ValueError("kernel amplitudes must be nonnegative")
        if not (self.c > 0 and self.p > 1 and self.q > 1 and self.D0 > 0):
            raise ValueError("ETAS requires c > 0, p > 1, q > 1 and D0 > 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "alpha_m", am)
        for name in ("c", "p", "D0", "gamma", "q", "m0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        tt = self.default_truncation(self.c, self.p) if self.t_trunc is None else float(self.t_trunc)
        if tt <= 0:
            raise ValueError("t_trunc must be positive")
        object.__setattr__(self, "t_trunc", tt)

    @staticmethod
    def default_truncation(c, p, decay=0.95):
        """Lag at which the Omori density has fallen by ``decay`` from its value at 0."""
        return c * ((1.0 - decay) ** (-1.0 / p) - 1.0)

    @property
    def horizon(self) -> float:
        return self.t_trunc

    @property
    def radius(self):
        return None

    @property
    def n_params(self) -> int:
        return 13

    def names(self):
        return [f"A{s}" for s in _PAIRS] + [f"alpha_m{s}" for s in _PAIRS] + ["c", "p", "D0", "gamma", "q"]

    def vector(self):
        return np.concatenate(
            [self.A.ravel(), self.alpha_m.ravel(), [self.c, self.p, self.D0, self.gamma, self.q]]
        )

    def with_vector(self, v):
        v = np.asarray(v, dtype=float)
        return replace(
            self, A=v[0:4], alpha_m=v[4:8], c=v[8], p=v[9], D0=v[10], gamma=v[11], q=v[12]
        )

    def amplitude_names(self):
        return [f"A{s}" for s in _PAIRS]

    def entry_names(self, k, l):
        return [f"A{k}{l}", f"alpha_m{k}{l}"]

    def shared_names(self):
        return ["c", "p", "D0", "gamma", "q"]

    def control_only_names(self):
        return self.entry_names(0, 0)

    def is_null(self) -> bool:
        return not np.any(self.A > 0)

    def omori_norm(self) -> float:
        return 1.0 - (1.0 + self.t_trunc / self.c) ** (1.0 - self.p)

    def omori(self, dt):
        dt = np.asarray(dt, dtype=float)
        inside = (dt > 0) & (dt <= self.t_trunc)
        val = (self.p - 1.0) / self.c * (1.0 + np.where(inside, dt, 0.0) / self.c) ** (-self.p)
        return np.where(inside, val / self.omori_norm(), 0.0)

    def omori_integral(self, lo, hi):
        lo = np.clip(lo, 0.0, self.t_trunc)
        hi = np.clip(hi, 0.0, self.t_trunc)
        hi = np.maximum(hi, lo)
        e = 1.0 - self.p
        return ((1.0 + lo / self.c) ** e - (1.0 + hi / self.c) ** e) / self.omori_norm()

    def scale(self, mag):
        return self.D0 * np.exp(self.gamma * (np.asarray(mag, dtype=float) - self.m0))

    def spatial(self, dx, dy, mag):
        d = self.scale(mag)
        return (self.q - 1.0) / (np.pi * d) * (1.0 + (dx * dx + dy * dy) / d) ** (-self.q)

    def productivity(self, mag, k, l):
        return self.A[k, l] * np.exp(self.alpha_m[k, l] * (np.asarray(mag, dtype=float) - self.m0))

    def values(self, dt, dx, dy, mag, k, l):
        if mag is None:
            raise ValueError("ETAS kernels need event magnitudes")
        return self.productivity(mag, k, l) * self.omori(dt) * self.spatial(dx, dy, mag)

    def spatial_fraction(self, x, y, mag, region):
        """Mass of ``f(. | m)`` centred at each ``(x, y)`` that falls inside ``region``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        d = np.broadcast_to(self.scale(mag), x.shape)
        x0, x1, y0, y1 = region
        quads = [(x1 - x, y1 - y), (x - x0, y1 - y), (x - x0, y - y0), (x1 - x, y - y0)]
        n = self.quad_nodes
        prev = None
        while True:
            total = sum(_corner_mass(a, b, d, self.q, n) for a, b in quads)
            if prev is not None and np.max(np.abs(total - prev)) <= self.quad_tol * max(1.0, np.max(np.abs(total))):
                return total
            if n > 2048:
                raise RuntimeError(
                    f"spatial quadrature did not reach tolerance; estimate {total.max():.6g}, "
                    f"change {np.max(np.abs(total - prev)):.3g}"
                )
            prev = total
            n *= 2

    def masses(self, t, x, y, mag, k, l, a, u, region, grad=False):
        if grad:
            raise NotImplementedError("analytic ETAS mass gradients are not provided")
        if mag is None:
            raise ValueError("ETAS kernels need event magnitudes")
        T = self.omori_integral(a - t, u - t)
        out = self.productivity(mag, k, l) * T
        nz = out > 0
        if np.any(nz):
            out = out.copy()
            out[nz] *= self.spatial_fraction(np.asarray(x)[nz], np.asarray(y)[nz], np.asarray(mag)[nz], region)
        return out

    def sup(self, mag=None) -> np.ndarray:
        m = self.m0 if mag is None or len(np.atleast_1d(mag)) == 0 else float(np.max(mag))
        g0 = (self.p - 1.0) / self.c / self.omori_norm()
        f0 = (self.q - 1.0) / (np.pi * float(self.scale(m)))
        return self.A * np.exp(np.maximum(self.alpha_m, 0) * (m - self.m0)) * g0 * f0

    def branching_matrix(self, b_value=1.0, truncated=True) -> np.ndarray:
        """Expected offspring counts under a Gutenberg-Richter mark law."""
        bgr = b_value * np.log(10.0)
        with np.errstate(divide="ignore"):
            em = np.where(self.alpha_m < bgr, bgr / (bgr - self.alpha_m), np.inf)
        return self.A * em

    def to_dict(self) -> dict:
        return {
            "family": "etas",
            "A": self.A.tolist(),
            "alpha_m": self.alpha_m.tolist(),
            "c": self.c,
            "p": self.p,
            "D0": self.D0,
            "gamma": self.gamma,
            "q": self.q,
            "m0": self.m0,
            "t_trunc": self.t_trunc,
        }


def _corner_mass(a, b, d, q, n):
    """Mass of the radial power law in the corner rectangle ``[0,a] x [0,b]``.

    Splits the rectangle along its diagonal and integrates the closed-form
    radial CDF over the polar angle with ``n``-point Gauss-Legendre.
    """
    a = np.maximum(a, 0.0)
    b = np.maximum(b, 0.0)
    nodes, weights = np.polynomial.legendre.leggauss(n)

    def radial(rho):
        return (1.0 - (1.0 + rho * rho / d[:, None]) ** (1.0 - q)) / (2.0 * np.pi)

    out = np.zeros_like(a)
    for near, far in ((a, b), (b, a)):
        phi_max = np.arctan2(far, np.where(near > 0, near, 1.0))
        phi_max = np.where(near > 0, phi_max, 0.0)
        phi = 0.5 * phi_max[:, None] * (nodes[None, :] + 1.0)
        rho = near[:, None] / np.cos(phi)
        out += 0.5 * phi_max * (radial(rho) @ weights)
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """Background rates plus a kernel family: the full parameter ``theta``.

    ``mu_units="density"`` reads ``mu_k`` as events per unit time per unit
    area; ``"total"`` reads it as events per unit time over the whole
    region (density ``mu_k / |S|``).  ``gating="allocation"`` lets
    component-``k`` immigrants appear only in cells allocated to ``k``
    (before ``t_star`` every cell counts as control); ``"none"`` keeps both
    backgrounds active everywhere after ``t_star``.
    """

    mu: np.ndarray
    kernel: object
    background: Optional[BackgroundField] = None
    mu_units: str = "density"
    gating: str = "allocation"
    mu_min: float = 1e-8

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        if mu.size == 1:
            mu = np.repeat(mu, 2)
        if mu.size != 2 or np.any(mu < 0):
            raise ValueError("mu must hold two nonnegative background rates")
        object.__setattr__(self, "mu", mu)
        if self.mu_units not in ("density", "total"):
            raise ValueError("mu_units must be 'density' or 'total'")
        if self.gating not in ("allocation", "none"):
            raise ValueError("gating must be 'allocation' or 'none'")
        if not self.mu_min > 0:
            raise ValueError("mu_min must be positive")

    @property
    def family(self) -> str:
        return self.kernel.family

    @property
    def dim(self) -> int:
        return 2 + self.kernel.n_params

    def names(self):
        return ["mu0", "mu1"] + self.kernel.names()

    def vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.kernel.vector()])

    def with_vector(self, v) -> "ModelParams":
        v = np.asarray(v, dtype=float)
        if v.size != self.dim:
            raise ValueError(f"parameter vector has length {v.size}, expected {self.dim}")
        return replace(self, mu=v[:2], kernel=self.kernel.with_vector(v[2:]))

    def with_values(self, **values) -> "ModelParams":
        names = self.names()
        v = self.vector()
        for key, val in values.items():
            v[names.index(key)] = val
        return self.with_vector(v)

    def density_scale(self, area) -> float:
        return 1.0 if self.mu_units == "density" else 1.0 / area

    def index(self, names) -> np.ndarray:
        all_names = self.names()
        return np.array([all_names.index(n) for n in names], dtype=int)

    def is_poisson(self) -> bool:
        return self.kernel.is_null()

    def to_dict(self) -> dict:
        out = {
            "mu": self.mu.tolist(),
            "kernel": self.kernel.to_dict(),
            "mu_units": self.mu_units,
            "gating": self.gating,
            "mu_min": self.mu_min,
        }
        if self.background is not None:
            out["background"] = {"region": list(self.background.region), "weights": self.background.weights.tolist()}
        return out

    @classmethod
    def from_dict(cls, d) -> "ModelParams":
        kd = dict(d["kernel"])
        fam = kd.pop("family")
        if fam == "expgauss":
            kernel = ExpGaussKernel(**kd)
        elif fam == "etas":
            kernel = EtasKernel(**kd)
        else:
            raise ValueError(f"unknown kernel family {fam!r}")
        bg = None
        if d.get("background"):
            bg = BackgroundField(d["background"]["weights"], d["background"]["region"])
        return cls(
            mu=d["mu"],
            kernel=kernel,
            background=bg,
            mu_units=d.get("mu_units", "density"),
            gating=d.get("gating", "allocation"),
            mu_min=d.get("mu_min", 1e-8),
        )


# ---------------------------------------------------------------------------
# Intensities
# ---------------------------------------------------------------------------


def gate(params, t, cells, allocation, t_star):
    """Indicator (n, 2) of which component's background is active."""
    t = np.asarray(t, dtype=float)
    n = t.size
    out = np.zeros((n, 2))
    pre = t <= t_star
    if params.gating == "none":
        out[~pre, :] = 1.0
    else:
        z = allocation.z[cells[~pre]]
        out[np.flatnonzero(~pre), z] = 1.0
    out[pre, 0] = 1.0
    return out


def background_at(params, t, x, y, cells, allocation, t_star, area):
    """Gated background intensity ``mu_k^z`` at the given points, shape (n, 2)."""
    g = gate(params, t, cells, allocation, t_star)
    s = params.density_scale(area)
    bg = g * params.mu[None, :] * s
    if params.background is not None:
        for k in range(2):
            bg[:, k] *= params.background.value(k, x, y)
    return bg


def intensities_at(params, catalog, labels, tess, allocation, t, x, y, chunk=1_000_000):
    """Component intensities ``(lambda_0, lambda_1)`` at arbitrary points.

    ``labels`` covers every catalog event (pre-``t_star`` entries are 0);
    only events strictly before each query time contribute.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    cells = tess.cell_index(x, y)
    area = catalog.window.area
    lam = background_at(params, t, x, y, cells, allocation, catalog.t_star, area)
    ker = params.kernel
    if ker.is_null() or catalog.n == 0:
        return lam
    lo = np.searchsorted(catalog.t, t - ker.horizon, side="left")
    hi = np.searchsorted(catalog.t, t, side="left")
    cnt = hi - lo
    R = ker.radius
    # expand (query, history event) pairs in chunks of bounded size
    bounds = np.concatenate([[0], np.cumsum(cnt)])
    q0 = 0
    while q0 < t.size:
        q1 = int(np.searchsorted(bounds, bounds[q0] + chunk, side="right")) - 1
        q1 = min(max(q1, q0 + 1), t.size)
        c = cnt[q0:q1]
        tot = int(c.sum())
        if tot:
            own = np.repeat(np.arange(q0, q1), c)
            js = np.arange(tot) - np.repeat(np.cumsum(c) - c, c) + np.repeat(lo[q0:q1], c)
            dx = x[own] - catalog.x[js]
            dy = y[own] - catalog.y[js]
            if R is not None:
                keep = (np.abs(dx) <= R) & (np.abs(dy) <= R)
                own, js, dx, dy = own[keep], js[keep], dx[keep], dy[keep]
            labs = labels[js]
            if np.any(labs < 0):
                raise ValueError("labels required for every history event")
            dt = t[own] - catalog.t[js]
            m = None if catalog.mag is None else catalog.mag[js]
            for k in range(2):
                lam[:, k] += np.bincount(own, weights=ker.values(dt, dx, dy, m, k, labs), minlength=t.size)
        q0 = q1
    return lam


def _full_labels(catalog, labelling):
    if labelling is None:
        return np.asarray(catalog.label)
    bits = np.asarray(getattr(labelling, "bits", labelling))
    if bits.size != catalog.n_post:
        raise ValueError("labelling length does not match post-t* event count")
    lab = np.asarray(catalog.label).copy()
    lab[catalog.n_pre:] = bits
    return lab


def evaluate_intensity(params, catalog, labelling, point, allocation, tess, component=None, coverage="warn"):
    """Conditional intensity of one component (or both) at ``point``.

    History is every catalog event strictly before ``point.t`` with its
    label (from ``labelling`` for post-``t_star`` events, else the catalog's
    own labels).  Returns a float when ``component`` is given, otherwise the
    pair ``(lambda_0, lambda_1)``.
    """
    labels = _full_labels(catalog, labelling)
    hist = catalog.t < point.t
    if np.any(labels[hist] < 0):
        raise ValueError("labels required for every post-t* history event")
    if point.t - catalog.window.t_start < params.kernel.horizon and coverage != "ignore":
        msg = "history coverage before this point is shorter than the kernel truncation"
        if coverage == "error":
            raise ValueError(msg)
        warnings.warn(msg, stacklevel=2)
    lam = intensities_at(params, catalog, labels, tess, allocation, [point.t], [point.x], [point.y])[0]
    return lam if component is None else float(lam[component])


def oracle_score(params, catalog, labelling, point, allocation, tess, floor=None):
    """``log(lambda_1 / lambda_0)`` at ``point``.

    With ``floor`` set, intensities are clipped from below at ``floor``
    instead of raising on a vanishing component.
    """
    lam = evaluate_intensity(params, catalog, labelling, point, allocation, tess, coverage="ignore")
    if floor is not None:
        lam = np.maximum(lam, floor)
    elif np.any(lam <= 0):
        raise MarginViolation("margin violated: a component intensity is zero at this point")
    return float(np.log(lam[1]) - np.log(lam[0]))


class Decision(enum.Enum):
    PLUS = "plus"
    MINUS = "minus"
    AMBIGUOUS = "ambiguous"


def classify_decisive(score, b):
    """Place a score in the decisive sets or the ambiguous band of half-width ``b``."""
    if not b > 0:
        raise ValueError("threshold b must be positive")
    if score >= b:
        return Decision.PLUS
    if score <= -b:
        return Decision.MINUS
    return Decision.AMBIGUOUS


def minority_label(score, b):
    """Label opposing the preferred component on a decisive set, else None."""
    d = classify_decisive(score, b)
    if d is Decision.PLUS:
        return 0
    if d is Decision.MINUS:
        return 1
    return None
