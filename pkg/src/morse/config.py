"""Run configuration.

One YAML document describes a whole run. Unknown keys are rejected at every
nesting level; defaults follow the published implementation details where
they exist (AdamW at 5e-4, 256-wide MLPs, alpha = 0.7, L = 128, ...).
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneConfig(_Strict):
    in_channels: int = Field(1, ge=1)
    num_classes: int = Field(3, ge=2)
    depth: int = Field(3, ge=2, le=6)
    base_channels: int = Field(8, ge=1)
    convs_per_block: int = Field(2, ge=1, le=4)
    expert_count: int = Field(3, ge=1)
    expert_dim: int = Field(256, ge=1)

    @model_validator(mode="after")
    def _experts_fit(self):
        if self.expert_count > self.depth:
            raise ValueError(f"expert_count {self.expert_count} exceeds the {self.depth} decoder blocks")
        return self


class ModelConfig(_Strict):
    use_smoe: bool = True
    use_iar: bool = True
    dense_moe: bool = False
    mlp_hidden: tuple[int, ...] = (256, 256)
    gate_channels: tuple[int, ...] = (256, 256, 256)
    pe_frequencies: int = Field(128, ge=1)
    pe_init_std: float = Field(1.0, gt=0)
    head_hidden: tuple[int, ...] = (256, 256)

    @model_validator(mode="after")
    def _flags(self):
        if self.dense_moe and not self.use_smoe:
            raise ValueError("dense_moe conflicts with use_smoe=false (no MoE stage to densify)")
        return self

    @property
    def arm(self) -> str:
        if not self.use_smoe:
            return "IAR" if self.use_iar else "baseline"
        moe = "MoE" if self.dense_moe else "SMoE"
        if not self.use_iar:
            return moe
        return "IAR+MoE" if self.dense_moe else "MORSE"


class TrainConfig(_Strict):
    total_iters: int = Field(2000, gt=0)
    lr0: float = Field(5e-4, gt=0)
    poly_power: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    lambda_rend: float = Field(0.1, ge=0)
    rend_schedule: Literal["awa", "constant"] = "awa"
    alpha: float = Field(0.7, ge=0, lt=1)
    n_points_train: int = Field(2048, ge=0)
    n_points_test: int = Field(8192, ge=0)
    k_p: int = Field(3, ge=1)
    rho: float = 0.75
    batch_size: int = Field(4, ge=1)
    seed: int | None = None
    log_every: int = Field(1, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, v):
        if not 0.5 < v < 1:
            raise ValueError("rho must satisfy 0.5 < rho < 1")
        return v


class SceneConfig(_Strict):
    resolution: int = Field(128, ge=8)
    num_classes: int = Field(3, ge=2)
    shape_family: Literal["disk", "ellipse", "star", "mixed"] = "star"
    star_amplitude: float = Field(0.2, ge=0, lt=1)
    star_lobes: tuple[int, int] = (6, 14)
    noise: float = Field(0.35, ge=0)
    n_train: int = Field(40, ge=0)
    n_test: int = Field(10, ge=0)
    seed: int | None = None


class RunConfig(_Strict):
    seed: int = 0
    out_dir: str = "runs/default"
    backbone: BackboneConfig = BackboneConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    scene: SceneConfig = SceneConfig()

    @model_validator(mode="after")
    def _consistent(self):
        if self.backbone.num_classes != self.scene.num_classes:
            raise ValueError(
                f"backbone.num_classes={self.backbone.num_classes} != scene.num_classes={self.scene.num_classes}"
            )
        if self.scene.resolution % (2**self.backbone.depth):
            raise ValueError(f"scene.resolution must be divisible by 2**depth = {2**self.backbone.depth}")
        return self

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    @property
    def scene_seed(self) -> int:
        return self.seed if self.scene.seed is None else self.scene.seed

    def with_updates(self, **sections) -> "RunConfig":
        """Return a copy with per-section field overrides, e.g. ``train={"alpha": 0}``."""
        data = self.model_dump()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return RunConfig.model_validate(data)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return RunConfig.model_validate(data)


def dump_config(cfg: RunConfig) -> str:
    data = cfg.model_dump(mode="json")
    return yaml.safe_dump(data, sort_keys=False)
