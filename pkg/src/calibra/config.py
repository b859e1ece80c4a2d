"""Run configuration schema (JSON or YAML), validated before any work starts."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CsvSource(_Strict):
    path: str
    features: list[str]
    label: str


class GeneratorSource(_Strict):
    kind: Literal["variance_counterexample", "two_point", "bernoulli", "grid_labels", "bounded_density"]
    seed: int = 0
    p1: Optional[dict[str, float]] = None
    p2: Optional[dict[str, float]] = None
    lam: Optional[float] = Field(default=None, alias="lambda")
    probs: Optional[list[float]] = None
    n: int = 16
    cells: int = 8
    atoms: int = 200
    m1: float = 0.5
    m2: float = 2.0


class DatasetBlock(_Strict):
    exact: Optional[str] = None
    csv: Optional[CsvSource] = None
    generator: Optional[GeneratorSource] = None

    @field_validator("generator")
    @classmethod
    def _one_source(cls, v, info):
        given = [k for k in ("exact", "csv") if info.data.get(k) is not None] + (["generator"] if v else [])
        if len(given) > 1:
            raise ValueError(f"give exactly one dataset source, got {given}")
        return v


class GroupPredicateModel(_Strict):
    id: str
    column: str
    op: Literal["in_range", "equals"]
    args: list[Union[float, str]]


class JointBlock(_Strict):
    La: Optional[float] = Field(default=None, gt=0)
    Lc: Optional[float] = Field(default=None, gt=0)
    parallel: bool = False


class AdversaryBlock(_Strict):
    kind: Literal["iid_density", "two_phase"]
    cells: int = 8
    m1: float = 0.5
    m2: float = 2.0
    seed: int = 0
    shift: float = 0.2
    width: float = 0.5


class OnlineBlock(_Strict):
    T: int = Field(gt=0)
    C: float = Field(default=1.0, gt=0)
    seeds: list[int] = Field(default_factory=lambda: [0])
    label_points: int = Field(default=101, ge=2)
    adversary: AdversaryBlock
    L: Optional[float] = Field(default=None, gt=0)


class RunConfig(_Strict):
    schema_version: Literal[1]
    dataset: Optional[DatasetBlock] = None
    property: str = "mean"
    groups: list[GroupPredicateModel] = Field(default_factory=list)
    m: int = Field(default=19, ge=1)
    alpha: Optional[float] = Field(default=None, gt=0)
    f_init: Optional[Union[float, list[float]]] = None
    f1_init: Optional[Union[float, list[float]]] = None
    joint: JointBlock = Field(default_factory=JointBlock)
    online: Optional[OnlineBlock] = None
    predictor: Optional[str] = None

    base_dir: str = Field(default=".", exclude=True)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def group_dicts(self) -> list[dict[str, Any]]:
        return [g.model_dump() for g in self.groups]


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    if "base_dir" in raw:
        raise ConfigError("base_dir is not a config key")
    try:
        return RunConfig.model_validate({**raw, "base_dir": str(path.parent)})
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc
