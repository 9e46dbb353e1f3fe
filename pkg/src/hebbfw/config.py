"""Experiment configuration: a versioned JSON document with a strict schema."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .backbones import ConfigError, preset_config
from .data import PreprocessConfig
from .fewshot import EpisodeConfig
from .train import OptimConfig, ScheduleConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    preset: str = "desk_vit"
    overrides: dict = Field(default_factory=dict)


class HfwSection(_Strict):
    eta_max: float = Field(1.0, gt=0)
    delta: float = Field(1.0, gt=0)
    eps: float = Field(1e-6, gt=0)
    memory_scope: Literal["per_forward", "per_episode"] = "per_forward"
    heads: Optional[int] = Field(None, ge=1)


class EpisodeSection(_Strict):
    n_way: int = Field(5, ge=2)
    k_shot: int = Field(1, ge=1)
    n_query: int = Field(15, ge=1)
    train_episodes: int = Field(600, ge=1)
    val_episodes: int = Field(200, ge=1)
    test_episodes: int = Field(400, ge=1)


class PreprocessSection(_Strict):
    target: int = Field(84, gt=0)
    crop_pad: int = Field(8, ge=0)
    hflip_p: float = Field(0.5, ge=0, le=1)
    rotation_deg: float = Field(15.0, ge=0)
    augment: bool = True


class DataSection(_Strict):
    source: Literal["omniglot", "synth"] = "omniglot"
    root: Optional[str] = None
    synth_classes: int = Field(30, ge=2)
    synth_per_class: int = Field(20, ge=1)
    synth_extent: int = Field(28, gt=0)
    synth_seed: int = 7
    synth_jitter: float = Field(0.01, ge=0)
    synth_stroke: float = Field(1.2, gt=0)
    synth_rotation_sd: float = Field(3.0, ge=0)
    class_augment: bool = False
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    remainder: Literal["train", "val", "test"] = "val"
    preprocess: PreprocessSection = Field(default_factory=PreprocessSection)

    @model_validator(mode="after")
    def _ratios(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError("split_ratios must be non-negative and sum to 1")
        return self


class OptimSection(_Strict):
    lr: float = Field(5e-4, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip: float = Field(1.0, gt=0)


class ScheduleSection(_Strict):
    warmup_epochs: int = Field(10, ge=0)
    total_epochs: int = Field(60, ge=1)
    patience: int = Field(15, ge=1)

    @model_validator(mode="after")
    def _order(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")
        return self


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 42
    model: ModelSection = Field(default_factory=ModelSection)
    hfw: HfwSection = Field(default_factory=HfwSection)
    episodes: EpisodeSection = Field(default_factory=EpisodeSection)
    data: DataSection = Field(default_factory=DataSection)
    optim: OptimSection = Field(default_factory=OptimSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    output_dir: str = "runs"
    threads: int = Field(1, ge=1)
    deterministic: bool = True

    @model_validator(mode="after")
    def _model_resolves(self):
        self.backbone()
        return self

    # -- typed views used by the rest of the package ----------------------
    def backbone(self):
        hfw = self.hfw.model_dump(exclude_none=True)
        try:
            return preset_config(self.model.preset, self.model.overrides, hfw)
        except (ConfigError, ValueError) as exc:
            raise ValueError(f"model: {exc}") from None

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(**self.episodes.model_dump())

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(**self.data.preprocess.model_dump())

    def optim_config(self) -> OptimConfig:
        return OptimConfig(**self.optim.model_dump())

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(self.schedule.warmup_epochs, self.schedule.total_epochs)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


class ConfigSchemaError(ValueError):
    """Schema violation; ``str()`` names the offending field path."""


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigSchemaError(_describe(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigSchemaError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw)


def apply_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Return a re-validated copy with dotted-path overrides (``episodes.k_shot=3``)."""
    raw = cfg.model_dump(mode="json")
    for dotted, value in changes.items():
        if value is None:
            continue
        node = raw
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node[key]
        node[keys[-1]] = value
    return parse_config(raw)


def desk_config(**changes) -> ExperimentConfig:
    """The small synthetic-glyph setup used for smoke training."""
    base = ExperimentConfig(
        name="desk",
        model=ModelSection(preset="desk_vit", overrides={"embed_mode": "cls"}),
        episodes=EpisodeSection(n_query=35, train_episodes=50, val_episodes=50, test_episodes=100),
        data=DataSection(
            source="synth", synth_classes=30, synth_per_class=40, synth_extent=28,
            split_ratios=(4 / 6, 1 / 6, 1 / 6), class_augment=True,
            preprocess=PreprocessSection(target=28, crop_pad=0, hflip_p=0.0, rotation_deg=0.0),
        ),
        optim=OptimSection(lr=2e-4),
        schedule=ScheduleSection(warmup_epochs=1, total_epochs=10, patience=15),
    )
    return apply_overrides(base, **changes)
