"""Two weight-independent CNN branches tapped at three scales.

branch1 sees the (low, mid, high) band image, branch2 the RGB image. Both use
the same residual architecture: a stride-4 stem followed by three stages; the
output of each stage is one scale (sides n/4, n/8, n/16).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InputError
from .nn import BatchNorm, Conv2d, Module, relu
from .tensor import Tensor, add, maxpool2d

N_SCALES = 3


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    input_side: int = 224
    preset_name: str = "tiny"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != N_SCALES or len(self.blocks_per_stage) != N_SCALES:
            raise ConfigError("backbone needs exactly three stages")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigError("stage channels and block counts must be positive")
        if self.input_side % 16:
            raise ConfigError(f"input_side must be a multiple of 16, got {self.input_side}")

    @classmethod
    def preset(cls, name: str, input_side: int = 224) -> "BackboneConfig":
        """Named presets. ``resnet50`` mirrors resnet50's last three stage widths
        and depths; it ships without pretrained weights."""
        if name == "tiny":
            return cls(input_side=input_side)
        if name == "resnet50":
            return cls((512, 1024, 2048), (4, 6, 3), input_side, "resnet50")
        raise ConfigError(f"unknown backbone preset {name!r}")

    def scale_sides(self) -> tuple[int, int, int]:
        n = self.input_side
        return (n // 4, n // 8, n // 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d


class ScaleFeatures(NamedTuple):
    x: tuple  # branch1 features, finest scale first
    y: tuple  # branch2 features


class ResidualBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int, cfg: BackboneConfig, dtype):
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps, dtype=dtype)
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, 1, dtype=dtype)
        self.bn1 = BatchNorm(c_out, **bn)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, 1, dtype=dtype)
        self.bn2 = BatchNorm(c_out, **bn)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(rng, c_in, c_out, 1, stride, 0, dtype=dtype)
            self.proj_bn = BatchNorm(c_out, **bn)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return relu(add(h, skip))


class Branch(Module):
    def __init__(self, rng, cfg: BackboneConfig, dtype=np.float64, in_channels: int = 3):
        c = cfg.stage_channels
        self.stem = Conv2d(rng, in_channels, c[0], 3, 2, 1, dtype=dtype)
        self.stem_bn = BatchNorm(c[0], cfg.bn_momentum, cfg.bn_eps, dtype)
        self.stages = []
        c_prev = c[0]
        for s, (width, depth) in enumerate(zip(c, cfg.blocks_per_stage)):
            blocks = []
            for b in range(depth):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(ResidualBlock(rng, c_prev, width, stride, cfg, dtype))
                c_prev = width
            self.stages.append(Stage(blocks))

    def forward(self, x: Tensor) -> list[Tensor]:
        h = maxpool2d(relu(self.stem_bn(self.stem(x))), 2)
        taps = []
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return taps


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class TwoBranchBackbone(Module):
    """Holds ``b1`` (band input) and ``b2`` (RGB input)."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float64, with_branch2: bool = True):
        self.cfg = cfg
        # separate streams so branch1 init does not depend on branch2 existing
        self.b1 = Branch(np.random.default_rng([seed, 1]), cfg, dtype)
        self.b2 = Branch(np.random.default_rng([seed, 2]), cfg, dtype) if with_branch2 else None

    def _check(self, t: Tensor, what: str) -> Tensor:
        n = self.cfg.input_side
        if not isinstance(t, Tensor):
            t = Tensor(t)
        if t.shape[-3:] != (3, n, n):
            raise InputError(f"{what} must be 3x{n}x{n}, got {t.shape}")
        return t

    def forward(self, band, rgb) -> ScaleFeatures:
        band = self._check(band, "band image")
        xs = tuple(self.b1(band))
        if self.b2 is None:
            return ScaleFeatures(x=xs, y=(None,) * N_SCALES)
        rgb = self._check(rgb, "rgb image")
        if band.shape != rgb.shape:
            raise InputError(f"band {band.shape} and rgb {rgb.shape} batch shapes differ")
        return ScaleFeatures(x=xs, y=tuple(self.b2(rgb)))

    extract = forward
