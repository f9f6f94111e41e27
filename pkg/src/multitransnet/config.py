"""JSON run and sweep configurations (schema-validated, unknown keys rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .assembly import WeightMode
from .benchmarks import PROBLEM_IDS, P2_SETTINGS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ShapeConfig(_Strict):
    """``optimize`` searches at M; ``preprocess`` fits C at M0 then predicts;
    ``formula`` uses the given C; ``fixed`` takes explicit per-network shapes."""

    strategy: Literal["optimize", "formula", "preprocess", "fixed"] = "optimize"
    C: Optional[float] = Field(default=None, gt=0)
    M0: Optional[int] = Field(default=None, ge=1)
    gammas: Optional[list[float]] = None
    interval: tuple[float, float] = (0.0, 5.0)
    iterations: int = Field(default=7, ge=1)
    anchor: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _needs(self):
        if self.strategy == "formula" and self.C is None:
            raise ValueError("formula strategy needs C")
        if self.strategy == "preprocess" and self.M0 is None:
            raise ValueError("preprocess strategy needs M0")
        if self.strategy == "fixed" and not self.gammas:
            raise ValueError("fixed strategy needs gammas")
        if not self.interval[1] > self.interval[0] >= 0:
            raise ValueError("interval must satisfy 0 <= a < b")
        return self


class SamplingConfig(_Strict):
    spacing: Optional[float] = Field(default=None, gt=0)
    boundary_counts: Optional[object] = None
    interface_counts: Optional[object] = None
    n_test: Optional[int] = Field(default=None, ge=1)
    test_seed: int = 0


class OutputConfig(_Strict):
    report_json: Optional[str] = None
    report_csv: Optional[str] = None
    trace_json: Optional[str] = None
    system_dump: Optional[str] = None
    bank_dir: Optional[str] = None


class RunConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    problem: str
    contrast: Optional[list[float]] = None
    setting: Optional[str] = None
    M: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)
    network: Literal["multi", "single"] = "multi"
    allocation: Literal["uniform", "equal"] = "uniform"
    shape: ShapeConfig = ShapeConfig()
    weight_mode: WeightMode = WeightMode.AUGMENTED
    sampling: SamplingConfig = SamplingConfig()
    rank_tol: Optional[float] = Field(default=None, gt=0)
    gradients: bool = True
    gauge: bool = True
    memory_budget_mb: int = Field(default=512, ge=16)
    check: Optional[dict[str, float]] = None
    output: OutputConfig = OutputConfig()

    @field_validator("problem")
    @classmethod
    def _pid(cls, v):
        v = v.upper()
        if v not in PROBLEM_IDS:
            raise ValueError(f"unknown problem {v!r}")
        return v

    @field_validator("contrast")
    @classmethod
    def _positive(cls, v):
        if v is not None and any(not c > 0 for c in v):
            raise ValueError("contrast parameters must be positive")
        return v

    @field_validator("setting")
    @classmethod
    def _setting(cls, v):
        if v is not None and v.upper() not in P2_SETTINGS:
            raise ValueError(f"setting must be one of {sorted(P2_SETTINGS)}")
        return v

    def problem_options(self) -> dict:
        opts = {}
        if self.setting is not None:
            opts["setting"] = self.setting
        if self.problem == "P4":
            opts["gauge"] = self.gauge
        return opts


class SweepConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    template: RunConfig
    M_values: list[int] = Field(min_length=1)
    contrasts: Optional[list[list[float]]] = None
    repetitions: int = Field(default=10, ge=1)
    trim: int = Field(default=2, ge=0)
    seed_policy: Literal["sequential"] = "sequential"
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _trim(self):
        if self.trim % 2:
            raise ValueError("trim counts extremes removed in total and must be even")
        if self.trim and self.repetitions < 3:
            raise ValueError("trimming needs at least 3 repetitions")
        if self.trim >= self.repetitions:
            raise ValueError("trim must leave at least one run")
        return self


def load_json(path, model):
    """Read ``path`` into ``model``; every failure becomes :class:`ConfigError`."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    return load_json(path, RunConfig)


def load_sweep_config(path) -> SweepConfig:
    return load_json(path, SweepConfig)
