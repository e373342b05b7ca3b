"""Declarative run configuration (YAML or JSON) for the command line.

Every section rejects unknown keys.  ``RunConfig.model_json_schema()`` is
published as ``docs/config.schema.json``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .io import load_tessellation
from .model import Allocation, ModelParams, Window
from .presets import BENCHMARK, benchmark_params

__all__ = [
    "RunConfig",
    "load_config",
    "config_hash",
    "COMMANDS",
]

COMMANDS = ("simulate", "fit-naive", "fit-oracle", "fit-sem", "fit-hardem", "estimate", "bootstrap", "gof", "band",
            "study")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WindowSection(_Strict):
    t_start: float = 0.0
    t_end: float = BENCHMARK["t_end"]
    region: Tuple[float, float, float, float] = (0.0, BENCHMARK["side"], 0.0, BENCHMARK["side"])
    t_star: float = BENCHMARK["t_star"]

    @model_validator(mode="after")
    def _order(self):
        if not self.t_start <= self.t_star < self.t_end:
            raise ValueError("need t_start <= t_star < t_end")
        return self

    def window(self) -> Window:
        x0, x1, y0, y1 = self.region
        return Window(self.t_start, self.t_end, x0, x1, y0, y1)


class TessellationSection(_Strict):
    grid: Optional[Union[int, Tuple[int, int]]] = BENCHMARK["grid"]
    polygons: Optional[list] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def _one(self):
        given = [self.polygons is not None, self.path is not None]
        if sum(given) > 1:
            raise ValueError("give at most one of 'polygons' and 'path'")
        return self

    def build(self, region):
        if self.path is not None:
            return load_tessellation(self.path, region)
        if self.polygons is not None:
            return load_tessellation({"polygons": self.polygons}, region)
        return load_tessellation({"grid": self.grid}, region)


class AllocationSection(_Strict):
    treated_cells: Optional[List[int]] = None
    z: Optional[List[int]] = None
    fraction: float = BENCHMARK["treated_fraction"]
    seed: int = 0

    @field_validator("fraction")
    @classmethod
    def _frac(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        return v

    def build(self, tess) -> Allocation:
        if self.z is not None and self.treated_cells is not None:
            raise ValueError("give either 'z' or 'treated_cells', not both")
        if self.z is not None:
            return Allocation(self.z).check(tess)
        if self.treated_cells is not None:
            return Allocation.observed(tess, self.treated_cells)
        return Allocation.random(tess.n_cells, self.fraction, self.seed)


class ModelSection(_Strict):
    """Model template: the benchmark preset, an inline dict or a params JSON file.

    A params file written by a ``fit-*`` command (key ``params``) is accepted.
    """

    preset: Optional[Literal["benchmark"]] = "benchmark"
    params: Optional[dict] = None
    path: Optional[str] = None

    def build(self) -> ModelParams:
        if self.path is not None:
            d = json.loads(Path(self.path).read_text(encoding="utf-8"))
            return ModelParams.from_dict(d.get("params", d))
        if self.params is not None:
            return ModelParams.from_dict(self.params)
        return benchmark_params()


class SimulateSection(_Strict):
    method: Literal["branching", "thinning"] = "branching"
    n_replicates: int = Field(1, ge=1)
    warmup: float = Field(0.0, ge=0.0)
    b_value: float = Field(1.0, gt=0.0)
    max_events: int = Field(2_000_000, ge=1)


class FitSection(_Strict):
    free: Optional[List[str]] = None
    include_pre: bool = True


class SemSection(_Strict):
    n_outer: int = Field(15, ge=1)
    n_inner: int = Field(10, ge=0)
    n_proposals: int = Field(8, ge=1)
    retain_top: int = Field(5, ge=1)
    weight_mode: Literal["uniform_top", "self_normalized"] = "uniform_top"
    anchor: Literal["freeze", "joint", "none"] = "freeze"
    patience: int = Field(3, ge=1)
    local_search: bool = True
    max_sweeps: int = Field(2, ge=1)
    free: Optional[List[str]] = None

    def build(self, seed):
        from .sem import SemConfig

        return SemConfig(seed=seed, **self.model_dump())


class HardEmSection(_Strict):
    n_blocks: int = Field(6, ge=1)
    b: float = Field(0.5, gt=0.0)
    alpha: float = Field(2.0, ge=0.0)
    include_pre: bool = False
    free: Optional[List[str]] = None

    def build(self):
        from .hardem import HardEmConfig

        return HardEmConfig(**self.model_dump())


class EstimandSection(_Strict):
    kind: Literal["ite", "aite", "daite", "taite", "dtaite"] = "daite"
    z: Optional[List[int]] = None
    z_b: Optional[List[int]] = None
    cell: Optional[int] = None
    set_a: Optional[List[List[int]]] = None
    set_b: Optional[List[List[int]]] = None
    horizon: Optional[float] = None
    n_reps: int = Field(200, ge=2)
    per_unit_time: bool = True

    def build(self, allocation, seed):
        """Unset ``z`` is the configured allocation; unset DAITE ``z_b`` is no treatment."""
        from .estimands import EstimandRequest

        z = allocation.z if self.z is None else self.z
        z_b = self.z_b
        if self.kind == "daite" and z_b is None:
            z_b = [0] * len(allocation)
        return EstimandRequest(self.kind, z=z, z_b=z_b, cell=self.cell, set_a=self.set_a, set_b=self.set_b,
                               horizon=self.horizon, n_reps=self.n_reps, seed=seed,
                               per_unit_time=self.per_unit_time)


class BootstrapSection(_Strict):
    B: int = Field(20, ge=2)
    pipeline: Literal["naive", "sem", "oracle"] = "naive"
    level: float = Field(0.95, gt=0.0, lt=1.0)


class BandSection(_Strict):
    b: float = Field(0.5, gt=0.0)
    raster: int = Field(50, ge=2)
    slabs: Optional[int] = Field(None, ge=1)
    check: bool = True


class StudySection(_Strict):
    n_replicates: int = Field(50, ge=1)
    daite_reps: int = Field(200, ge=2)
    truth_reps: int = Field(2000, ge=2)
    control_at_truth: bool = True
    plugin_daite: bool = False


class RunConfig(_Strict):
    """One run of one subcommand.

    ``catalog`` is the input CSV of the fitting, ``gof`` and ``band``
    commands; ``fit`` is a params JSON (from ``fit-*``) used by ``estimate``,
    ``gof`` and ``band`` in place of the model template.
    """

    seed: int = 0
    catalog: Optional[str] = None
    fit: Optional[str] = None
    window: WindowSection = Field(default_factory=WindowSection)
    tessellation: TessellationSection = Field(default_factory=TessellationSection)
    allocation: AllocationSection = Field(default_factory=AllocationSection)
    model: ModelSection = Field(default_factory=ModelSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)
    fitting: FitSection = Field(default_factory=FitSection)
    sem: SemSection = Field(default_factory=SemSection)
    hardem: HardEmSection = Field(default_factory=HardEmSection)
    estimand: EstimandSection = Field(default_factory=EstimandSection)
    bootstrap: BootstrapSection = Field(default_factory=BootstrapSection)
    band: BandSection = Field(default_factory=BandSection)
    study: StudySection = Field(default_factory=StudySection)

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def load_config(path=None, overrides=None) -> RunConfig:
    """Parse and validate a YAML/JSON config; ``None`` gives all defaults."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    if overrides:
        data = {**data, **overrides}
    return RunConfig.model_validate(data)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form (defaults filled, keys sorted)."""
    return hashlib.sha256(cfg.canonical().encode("utf-8")).hexdigest()


def write_schema(path):
    Path(path).write_text(json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return Path(path)


__all__.append("write_schema")
