"""Multi-scale fusion and classification head.

Each scale: concat(x_att, y_att) on channels, downsample to 7x7 (max pool with
window floor(H/7), then bilinear to exactly 7x7). The per-scale maps are
concatenated on channels, globally average-pooled, batch-normalised and fed
to a two-layer MLP.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Linear, Module, relu
from .tensor import Tensor, avgpool_global, bilinear_resize, concat, maxpool2d

DOWNSAMPLE_ORDERS = ("pool-bilinear", "bilinear-pool")


@dataclass
class FusionConfig:
    s_x: int = 7
    s_y: int = 7
    n_scales: int = 3
    hidden_nodes: int = 256
    classes: int = 2
    downsample_order: str = "pool-bilinear"

    def __post_init__(self):
        if self.n_scales not in (1, 2, 3):
            raise ConfigError(f"n_scales must be 1, 2 or 3, got {self.n_scales}")
        if self.downsample_order not in DOWNSAMPLE_ORDERS:
            raise ConfigError(f"downsample_order must be one of {DOWNSAMPLE_ORDERS}")

    @property
    def scales(self) -> tuple[int, ...]:
        """1-based scale indices in use, deepest last (1 scale = scale 3 only)."""
        return tuple(range(4 - self.n_scales, 4))

    def to_dict(self) -> dict:
        return asdict(self)


def downsample(t: Tensor, s_y: int = 7, s_x: int = 7, order: str = "pool-bilinear") -> Tensor:
    h, w = t.shape[-2:]
    if h < s_y or w < s_x:
        raise ShapeError(f"cannot downsample {h}x{w} to {s_y}x{s_x}")
    win = min(h // s_y, w // s_x)
    if order == "pool-bilinear":
        if win > 1:
            t = maxpool2d(t, win)
        return bilinear_resize(t, s_y, s_x)
    t = bilinear_resize(t, s_y * win, s_x * win)
    return maxpool2d(t, win) if win > 1 else t


def fuse_scale(x_a: Tensor, y_a: Optional[Tensor], cfg: FusionConfig = FusionConfig()) -> Tensor:
    """(C,H,W) + (C,H,W) -> (2C, 7, 7); batched inputs keep the batch axis."""
    if y_a is not None and x_a.shape != y_a.shape:
        raise ShapeError(f"fuse_scale: {x_a.shape} vs {y_a.shape}")
    both = concat([x_a, y_a], axis=-3) if y_a is not None else x_a
    return downsample(both, cfg.s_y, cfg.s_x, cfg.downsample_order)


class FusionNorm(Module):
    """Batch norm on the pooled fusion vector (checkpoint prefix ``fusion.``)."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.bn = BatchNorm(features, momentum, eps, dtype)


class MLPHead(Module):
    """fc1 -> ReLU -> fc2. fc2 starts at zero so an untrained model scores every
    input 0.5 instead of reading out whatever the random features happen to encode."""

    def __init__(self, rng, d_in: int, hidden: int = 256, classes: int = 2, dtype=np.float64,
                 zero_output: bool = True):
        self.fc1 = Linear(rng, d_in, hidden, dtype)
        self.fc2 = Linear(rng, hidden, classes, dtype, zero=zero_output)

    def forward(self, v: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(v)))


def pooled_length(stage_channels: Sequence[int], scales: Sequence[int], paired: bool = True) -> int:
    return (2 if paired else 1) * sum(stage_channels[i - 1] for i in scales)


def fuse_and_classify(attended, cfg: FusionConfig, fusion: FusionNorm, head: MLPHead) -> Tensor:
    """``attended``: 3-tuple of (x_att, y_att) pairs (None for unused scales),
    batched (N, C, H, W). Returns (N, classes) logits."""
    maps = []
    for i in cfg.scales:
        pair = attended[i - 1] if i - 1 < len(attended) else None
        if pair is None:
            raise ConfigError(f"scale {i} required by n_scales={cfg.n_scales} is missing")
        x_a, y_a = pair
        maps.append(fuse_scale(x_a, y_a, cfg))
    fused = concat(maps, axis=1) if len(maps) > 1 else maps[0]
    vec = avgpool_global(fused)
    return head(fusion.bn(vec))
