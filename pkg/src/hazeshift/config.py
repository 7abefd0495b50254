"""Flat JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from .denoiser import DenoiserConfig
from .schedule import build_schedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # schedule
    T: int = 15
    kappa: float = 2.0
    gamma: float = 1.0
    # denoiser
    base_channels: int = 32
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 2, 4])
    num_res_blocks_per_scale: int = 1
    timestep_embed_dim: int = 64
    # training
    patch_size: int = 64
    patches_per_image: int = 16
    images_per_batch: int = 16
    learning_rate: float = 5e-5
    iterations: int = 1000
    timestep_sampling: str = "uniform"
    grad_clip: Optional[float] = None
    ckpt_every: int = 0
    # sampling; stride None means half the patch
    stride: Optional[int] = None
    window_batch: int = 16
    # synthesis
    n_pairs: int = 32
    size: int = 64
    haze: str = "mixed"
    # run
    seed: int = 0
    deterministic: bool = False
    threads: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def override(self, **values) -> "RunConfig":
        d = asdict(self)
        d.update({k: v for k, v in values.items() if v is not None})
        return RunConfig.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def schedule(self):
        return build_schedule(self.T, self.kappa, self.gamma)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            base_channels=self.base_channels,
            channel_multipliers=list(self.channel_multipliers),
            num_res_blocks_per_scale=self.num_res_blocks_per_scale,
            timestep_embed_dim=self.timestep_embed_dim,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            patch_size=self.patch_size,
            patches_per_image=self.patches_per_image,
            images_per_batch=self.images_per_batch,
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            seed=self.seed,
            timestep_sampling=self.timestep_sampling,
            grad_clip=self.grad_clip,
            ckpt_every=self.ckpt_every,
        )
