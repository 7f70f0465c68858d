"""Run configuration shared by training, evaluation and ablation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Union

from .backbone import BackboneConfig
from .checkpoint import config_hash
from .errors import ConfigError
from .fusion import FusionConfig
from .model import ModelConfig

# Keys that change the network; a checkpoint must agree on all of them.
ARCH_KEYS = ("k", "input_side", "scales", "xattn_enabled", "branch1_only", "scale_scores", "backbone")


@dataclass
class Paths:
    corpus: str = "corpus"
    checkpoint: str = "runs/model.ckpt"
    reports: str = "runs/reports"
    log: str = "runs/train_log.jsonl"


@dataclass
class RunConfig:
    seed: int = 0
    k: int = 10
    input_side: int = 224
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-4
    scales: int = 3
    xattn_enabled: bool = True
    branch1_only: bool = False
    scale_scores: bool = False
    dtype: str = "float32"
    hter_threshold: float = 0.5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.paths, dict):
            self.paths = Paths(**self.paths)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.scales not in (1, 2, 3):
            raise ConfigError(f"scales must be 1, 2 or 3, got {self.scales}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm in train mode)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.backbone.input_side != self.input_side:
            self.backbone = replace(self.backbone, input_side=self.input_side)
        self.model_config()  # validates the architecture early

    # -- variants ---------------------------------------------------------
    @property
    def variant(self) -> str:
        if self.branch1_only:
            return "branch1"
        if not self.xattn_enabled:
            return "base-fusion"
        return f"proposed({self.scales}scale)"

    def with_variant(self, variant: str) -> "RunConfig":
        mc = ModelConfig.for_variant(variant)
        return replace(self, scales=mc.fusion.n_scales, xattn_enabled=mc.xattn_enabled,
                       branch1_only=mc.branch1_only)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            fusion=FusionConfig(n_scales=self.scales),
            xattn_enabled=self.xattn_enabled,
            branch1_only=self.branch1_only,
            scale_scores=self.scale_scores,
            dtype=self.dtype,
        )

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def arch(self) -> dict[str, Any]:
        d = self.to_dict()
        return {k: d[k] for k in ARCH_KEYS}


def paper_scale(cfg: RunConfig) -> RunConfig:
    """Batch size 64 and 20 epochs."""
    return replace(cfg, batch_size=64, epochs=20)
