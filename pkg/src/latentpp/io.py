"""Catalog, tessellation and result serialisation."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .model import EventCatalog, GridTessellation, ModelParams, PolygonTessellation, Window

__all__ = [
    "load_catalog",
    "save_catalog",
    "load_tessellation",
    "dump_json",
    "write_rows",
    "file_sha256",
    "save_fit",
    "load_fit",
]

REQUIRED = ("t", "x", "y")
OPTIONAL = ("mag", "label")


def _parse(value, col, line):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"line {line}: column {col!r} is not a number ({value!r})") from None
    if math.isnan(v) or math.isinf(v):
        raise ValueError(f"line {line}: column {col!r} is not finite ({value!r})")
    return v


def load_catalog(path, t_star, window: Window) -> EventCatalog:
    """Read a CSV catalog with header ``t,x,y[,mag][,label]``.

    Rows are sorted by time; each event keeps its data-line number (1 for
    the first row after the header) in ``catalog.row``.  Labels may be
    empty (unknown), 0 or 1.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"catalog file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        unknown = [c for c in header if c not in REQUIRED + OPTIONAL]
        if unknown:
            raise ValueError(f"{path}: unknown columns {unknown}")
        pos = {c: header.index(c) for c in header}
        cols = {c: [] for c in header}
        rows = []
        for line, rec in enumerate(reader, start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise ValueError(f"line {line}: expected {len(header)} fields, found {len(rec)}")
            for c in header:
                f = rec[pos[c]].strip()
                if c == "label":
                    if f in ("", "-1", "NA", "nan"):
                        cols[c].append(-1)
                    elif f in ("0", "1"):
                        cols[c].append(int(f))
                    else:
                        raise ValueError(f"line {line}: label must be 0, 1 or empty ({f!r})")
                else:
                    cols[c].append(_parse(f, c, line))
            rows.append(line)
    rows = np.asarray(rows, dtype=int)
    t = np.asarray(cols["t"])
    x = np.asarray(cols["x"])
    y = np.asarray(cols["y"])
    outside = ~window.contains_xy(x, y) | (t <= window.t_start) | (t > window.t_end)
    if np.any(outside):
        raise ValueError(
            f"{int(outside.sum())} events fall outside the window (first at line {int(rows[outside][0])})"
        )
    return EventCatalog(
        t, x, y, t_star, window,
        mag=np.asarray(cols["mag"]) if "mag" in cols else None,
        label=np.asarray(cols["label"]) if "label" in cols else None,
        row=rows,
    )


def save_catalog(catalog: EventCatalog, path, labels=True):
    """Write ``catalog`` as CSV with round-trip float precision."""
    path = Path(path)
    header = list(REQUIRED)
    if catalog.mag is not None:
        header.append("mag")
    with_labels = labels and np.any(catalog.label >= 0)
    if with_labels:
        header.append("label")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(catalog.n):
            rec = [repr(float(catalog.t[i])), repr(float(catalog.x[i])), repr(float(catalog.y[i]))]
            if catalog.mag is not None:
                rec.append(repr(float(catalog.mag[i])))
            if with_labels:
                lab = int(catalog.label[i])
                rec.append("" if lab < 0 else str(lab))
            w.writerow(rec)
    return path


def load_tessellation(spec, region):
    """Build a tessellation from ``{"grid": [nx, ny]}`` or a polygon list.

    Polygons may be given as ``{"polygons": [[[x, y], ...], ...]}`` or as a
    GeoJSON-like FeatureCollection / list of Polygon geometries in planar
    coordinates.
    """
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text(encoding="utf-8"))
    if not isinstance(spec, dict):
        raise ValueError("tessellation spec must be a mapping")
    if "grid" in spec:
        g = spec["grid"]
        nx, ny = (g, g) if isinstance(g, int) else (int(g[0]), int(g[1]))
        if nx < 1 or ny < 1:
            raise ValueError("grid dimensions must be positive")
        return GridTessellation(region, nx, ny)
    if spec.get("type") == "FeatureCollection":
        polys = [_geojson_ring(f["geometry"]) for f in spec.get("features", [])]
    elif "polygons" in spec:
        polys = [_geojson_ring(p) if isinstance(p, dict) else p for p in spec["polygons"]]
    else:
        raise ValueError("tessellation spec needs 'grid', 'polygons' or a FeatureCollection")
    return PolygonTessellation(region, polys)


def _geojson_ring(geom):
    if geom.get("type") != "Polygon":
        raise ValueError(f"only Polygon geometries are supported, found {geom.get('type')!r}")
    coords = geom["coordinates"]
    if len(coords) != 1:
        raise ValueError("polygons with holes are not supported")
    return [tuple(c[:2]) for c in coords[0]]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj, path):
    """Stable-key-ordered JSON."""
    Path(path).write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return Path(path)


def write_rows(rows, path):
    """Write a list of dicts as CSV (columns from the first row)."""
    rows = list(rows)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if not rows:
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in _jsonable(r).items()})
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_fit(path, params, labels, loglik, start, upto, method, seed, extra=None):
    """Fitted parameters, post-``t_star`` labels and the log-likelihood they score.

    ``loglik`` is the complete-data log-likelihood over ``(start, upto]`` so a
    reload can re-evaluate it exactly.
    """
    d = {
        "params": params.to_dict(),
        "names": params.names(),
        "theta": params.vector(),
        "labels": None if labels is None else np.asarray(labels).astype(int),
        "loglik": float(loglik),
        "loglik_window": [float(start), float(upto)],
        "method": method,
        "seed": int(seed),
    }
    d.update(extra or {})
    return dump_json(d, path)


def load_fit(path) -> dict:
    """Inverse of :func:`save_fit`; ``params`` becomes a ModelParams and ``labels`` an int8 array."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if "params" not in d:
        raise ValueError(f"{path}: not a fit file (no 'params' key)")
    d["params"] = ModelParams.from_dict(d["params"])
    if d.get("labels") is not None:
        d["labels"] = np.asarray(d["labels"], dtype=np.int8)
    return d
