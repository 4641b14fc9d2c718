"""Model and optimizer settings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Tuple

import yaml


@dataclass
class ModelConfig:
    image_size: int = 960
    split_fpn_channels: int = 128
    merge_fpn_channels: int = 256
    encoder_layers: int = 3
    heads: int = 8
    ffn_dim: int = 2048
    dropout: float = 0.1
    merge_layers: int = 3
    merge_dim: int = 512
    mlp_dim: int = 512
    roi_size: int = 7
    max_cells: int = 640
    max_rows: int = 160
    max_cols: int = 160
    threshold: float = 0.5
    gamma: float = 2.0
    pretrained: bool = False

    @property
    def split_seq_len(self) -> int:
        return self.image_size // 2

    @property
    def split_seq_dim(self) -> int:
        return self.split_fpn_channels + self.image_size // 4

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-size 960px configuration."""
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """320px input with halved encoder widths, for desk-scale runs."""
        return cls(image_size=320, ffn_dim=1024, merge_dim=256, mlp_dim=256)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimConfig:
    lr: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4
    batch_size: int = 32
    clip_norm: float = 0.5
    epochs_split: int = 16
    epochs_merge: int = 24
    poly_power: float = 0.9
    split_schedule: str = "constant"  # or "poly"
    seed: int = 0
    workers: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lr", "eps", "batch_size", "clip_norm", "epochs_split", "epochs_merge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.poly_power <= 1:
            raise ValueError("poly_power must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)


def load_config(path: str | Path | None, preset: str = "full") -> RunConfig:
    """Read a YAML file with optional ``model:`` and ``optim:`` sections."""
    model = ModelConfig.tiny() if preset == "tiny" else ModelConfig.full()
    optim = OptimConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        model = replace(model, **{k: v for k, v in (data.get("model") or {}).items()})
        optim = OptimConfig.from_dict({**optim.to_dict(), **(data.get("optim") or {})})
    return RunConfig(model, optim)
