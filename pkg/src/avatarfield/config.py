"""Run configuration: one validated tree holding every tunable constant."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .articulation import ArticulationConfig
from .field import MlpConfig
from .hashgrid import HashGridConfig
from .occupancy import OccupancyConfig
from .renderer import RenderConfig


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rgb: float = 1.0
    alpha: float = 0.1
    hard: float = 0.1
    density: float = 0.1
    huber_delta: float = 0.1
    hard_const: float = math.log1p(math.exp(-1.0))

    @model_validator(mode="after")
    def _non_negative(self) -> "LossWeights":
        for name in ("rgb", "alpha", "hard", "density", "huber_delta", "hard_const"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    iterations: int = 2000
    rays_per_batch: int = 2048
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    lr_final_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    density_points: int = 4096
    density_reg: Literal["occupancy", "global", "none"] = "occupancy"
    skip: bool = True
    losses: LossWeights = LossWeights()
    log_every: int = 50

    @field_validator("iterations")
    @classmethod
    def _iterations(cls, v: int) -> int:
        if v < 0:
            raise ValueError("iterations must be >= 0")
        return v


class DataConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    width: int = 128
    height: int = 128
    # ground truth uses this many times the training sample count
    gt_oversample: int = 4
    amplitude: float = 150.0
    softness: float = 0.005


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: HashGridConfig = HashGridConfig()
    mlp: MlpConfig = MlpConfig()
    articulation: ArticulationConfig = ArticulationConfig()
    # canonical box margin as a fraction of the rest-pose extent
    bbox_margin: float = 0.1
    dtype: Literal["float32", "float64"] = "float32"


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    profile: Literal["test", "bench"] = "test"
    model: ModelConfig = ModelConfig()
    render: RenderConfig = RenderConfig()
    occupancy: OccupancyConfig = OccupancyConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    paths: dict[str, str] = Field(default_factory=dict)

    def dump(self) -> str:
        return yaml.safe_dump(json.loads(self.model_dump_json()), sort_keys=False)

    def override(self, **sections) -> "RunConfig":
        """Copy with nested fields replaced, e.g. ``override(train={"iterations": 5})``."""
        data = json.loads(self.model_dump_json())
        _merge(data, sections)
        return RunConfig.model_validate(data)


def _merge(base: dict, update: dict) -> None:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def load_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    return RunConfig.model_validate(data)
