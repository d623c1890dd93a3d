# config.py
"""Pipeline configuration: pydantic models loaded from a TOML file.

The file is plain ``key = value`` text grouped in ``[sections]``. When no
path is given the ``AU2AV_CONFIG`` variable is used (a ``.env`` file in the
working directory is honoured).
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import List, Optional

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic import ValidationError as PydanticValidationError

from errors import ConfigError
from providers import available_providers

CONFIG_ENV_VAR = "AU2AV_CONFIG"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class MediaSettings(_Section):
    sample_rate: int = Field(16000, gt=0)
    fps: float = Field(25.0, gt=0)
    window_ms: float = Field(200.0, gt=0)


class OptimizerSettings(_Section):
    """Adam settings plus the constant-then-linear-decay schedule."""

    learning_rate: float = Field(0.002, gt=0)
    beta1: float = Field(0.0, ge=0, lt=1)
    beta2: float = Field(0.9, ge=0, lt=1)
    constant_epochs: int = Field(50, ge=0)
    decay_epochs: int = Field(100, ge=0)


class Stage1LossWeights(_Section):
    lambda_FM: float = Field(10.0, ge=0, allow_inf_nan=False)
    lambda_PL: float = Field(10.0, ge=0, allow_inf_nan=False)
    lambda_CL: float = Field(1.0, ge=0, allow_inf_nan=False)
    lambda_BL: float = Field(10.0, ge=0, allow_inf_nan=False)
    lambda_RL: float = Field(1.0, ge=0, allow_inf_nan=False)
    margin: float = Field(1.0, gt=0, allow_inf_nan=False)


class Stage2LossWeights(_Section):
    lambda_cam: float = Field(2000.0, ge=0, allow_inf_nan=False)
    lambda_recycle: float = Field(100.0, ge=0, allow_inf_nan=False)
    lambda_identity: float = Field(10.0, ge=0, allow_inf_nan=False)
    lambda_lip: float = Field(100.0, ge=0, allow_inf_nan=False)
    lambda_BL: float = Field(100.0, ge=0, allow_inf_nan=False)
    lambda_adv: float = Field(1.0, ge=0, allow_inf_nan=False)


class Stage1NetworkSettings(_Section):
    resolution: int = Field(64, ge=8)
    base_channels: int = Field(16, gt=0)
    spade_hidden: int = Field(32, gt=0)
    n_mfcc: int = Field(13, gt=0)
    encoder_hidden: int = Field(32, gt=0)
    embedding_dim: int = Field(256, gt=0)
    disc_channels: int = Field(16, gt=0)
    disc_layers: int = Field(3, gt=0)
    temporal_window: int = Field(4, ge=0)
    sync_resolution: int = Field(224, ge=8)
    sync_channels: int = Field(16, gt=0)
    sync_dim: int = Field(256, gt=0)
    landmark_channels: int = Field(8, gt=0)

    @model_validator(mode="after")
    def _power_of_two(self):
        r = self.resolution
        if r & (r - 1):
            raise ValueError(f"resolution must be a power of two, got {r}")
        return self


class Stage1Settings(_Section):
    network: Stage1NetworkSettings = Field(default_factory=Stage1NetworkSettings)
    weights: Stage1LossWeights = Field(default_factory=Stage1LossWeights)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    epochs: int = Field(150, ge=0)
    batch_size: int = Field(1, gt=0)
    stabilization_epsilon: float = Field(0.01, gt=0)
    stabilization_patience: int = Field(5, gt=1)
    advance_at_epochs: List[int] = []
    sync_pretrain_steps: int = Field(100, ge=0)
    sync_adversarial: bool = False
    adapt_epochs: int = Field(5, ge=0)
    adapt_learning_rate: float = Field(1e-4, gt=0)


class Stage2NetworkSettings(_Section):
    resolution: int = Field(64, ge=8)
    base_channels: int = Field(8, gt=0)
    n_res_blocks: int = Field(4, ge=0)
    disc_channels: int = Field(8, gt=0)
    local_layers: int = Field(2, gt=0)
    global_layers: int = Field(4, gt=0)
    past_frames: int = Field(2, ge=1)
    predictor_channels: int = Field(8, gt=0)


class Stage2Settings(_Section):
    network: Stage2NetworkSettings = Field(default_factory=Stage2NetworkSettings)
    weights: Stage2LossWeights = Field(default_factory=Stage2LossWeights)
    optimizer: OptimizerSettings = Field(
        default_factory=lambda: OptimizerSettings(learning_rate=1e-4, beta1=0.5, beta2=0.999)
    )
    epochs: int = Field(100, ge=0)
    identity_literal: bool = False


class ProviderSettings(_Section):
    pose: str = "symmetry"
    landmark: str = "none"
    perceptual: str = "random_conv"
    embedding: str = "random_conv"
    acd_embedding: str = "random_conv"
    lip_reader: str = "none"

    @model_validator(mode="after")
    def _registered(self):
        for kind, name in self:
            known = available_providers(kind)
            if name not in known:
                raise ValueError(f"unknown {kind} provider '{name}' (available: {', '.join(known)})")
        return self


class PathSettings(_Section):
    data_dir: str = "data/prepared"
    source_dir: str = "data/stage2/human"
    target_dir: str = "data/stage2/anime"
    run_dir: str = "runs"
    stage1_checkpoint: Optional[str] = None


class PipelineConfig(_Section):
    media: MediaSettings = Field(default_factory=MediaSettings)
    stage1: Stage1Settings = Field(default_factory=Stage1Settings)
    stage2: Stage2Settings = Field(default_factory=Stage2Settings)
    providers: ProviderSettings = Field(default_factory=ProviderSettings)
    paths: PathSettings = Field(default_factory=PathSettings)
    seed: int = Field(0, ge=0)


def _digest(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def config_hash(cfg: PipelineConfig) -> str:
    return _digest(cfg.model_dump(mode="json"))


def network_hash(section: BaseModel) -> str:
    """Hash of architecture settings only; recorded in checkpoint headers."""
    return _digest(section.model_dump(mode="json"))


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except PydanticValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def load_config(path: Optional[str | Path] = None) -> PipelineConfig:
    load_dotenv(dotenv_path=".env")
    path = path or os.getenv(CONFIG_ENV_VAR)
    if not path:
        raise ConfigError(f"no config path given and {CONFIG_ENV_VAR} is not set")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return parse_config(data)


def dump_config(cfg: PipelineConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        toml.dump(cfg.model_dump(mode="json", exclude_none=True), f)
    return path
