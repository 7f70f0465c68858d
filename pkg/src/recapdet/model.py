"""The assembled detector and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import CrossAttention
from .backbone import N_SCALES, BackboneConfig, Branch, ScaleFeatures
from .errors import ConfigError, InputError
from .fusion import FusionConfig, FusionNorm, MLPHead, fuse_and_classify, pooled_length
from .nn import Module
from .tensor import Tensor

VARIANTS = ("branch1", "base-fusion", "proposed(1scale)", "proposed(2scale)", "proposed(3scale)")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    xattn_enabled: bool = True
    branch1_only: bool = False
    scale_scores: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        sides = self.backbone.scale_sides()
        for i in self.scales:
            if sides[i - 1] < max(self.fusion.s_x, self.fusion.s_y):
                raise ConfigError(
                    f"input side {self.backbone.input_side} gives {sides[i - 1]}x{sides[i - 1]} maps at scale {i}, "
                    f"smaller than the {self.fusion.s_y}x{self.fusion.s_x} fusion grid (use >= 112)")

    @classmethod
    def for_variant(cls, variant: str, backbone: Optional[BackboneConfig] = None, dtype: str = "float64",
                    **fusion_kw) -> "ModelConfig":
        backbone = backbone or BackboneConfig()
        if variant == "branch1":
            return cls(backbone, FusionConfig(n_scales=1, **fusion_kw), False, True, dtype=dtype)
        if variant == "base-fusion":
            return cls(backbone, FusionConfig(n_scales=3, **fusion_kw), False, dtype=dtype)
        for n in (1, 2, 3):
            if variant == f"proposed({n}scale)":
                return cls(backbone, FusionConfig(n_scales=n, **fusion_kw), True, dtype=dtype)
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")

    @property
    def scales(self) -> tuple[int, ...]:
        return (N_SCALES,) if self.branch1_only else self.fusion.scales


class RecaptureNet(Module):
    """branch1 (bands) + branch2 (RGB) -> cross-attention -> multi-scale fusion -> logits.

    The branch1-only variant drops branch2 and cross-attention and classifies
    from the deepest branch1 scale.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        bb = cfg.backbone
        self.b1 = Branch(np.random.default_rng([seed, 1]), bb, dtype)
        self.b2 = None if cfg.branch1_only else Branch(np.random.default_rng([seed, 2]), bb, dtype)
        use_xattn = cfg.xattn_enabled and not cfg.branch1_only
        self.xattn = (
            CrossAttention(np.random.default_rng([seed, 3]), bb.stage_channels, cfg.scales, dtype, cfg.scale_scores)
            if use_xattn else None
        )
        d = pooled_length(bb.stage_channels, cfg.scales, paired=not cfg.branch1_only)
        self.fusion = FusionNorm(d, bb.bn_momentum, bb.bn_eps, dtype)
        self.head = MLPHead(np.random.default_rng([seed, 4]), d, cfg.fusion.hidden_nodes, cfg.fusion.classes, dtype)

    @property
    def pooled_dim(self) -> int:
        return self.fusion.bn.weight.shape[0]

    def _as_input(self, t) -> Tensor:
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t))
        if t.dtype != np.dtype(self.cfg.dtype):
            t = Tensor(t.data.astype(self.cfg.dtype))
        n = self.cfg.backbone.input_side
        if t.ndim != 4 or t.shape[1:] != (3, n, n):
            raise InputError(f"expected a (B, 3, {n}, {n}) batch, got {t.shape}")
        return t

    def features(self, band, rgb) -> ScaleFeatures:
        band = self._as_input(band)
        xs = tuple(self.b1(band))
        if self.b2 is None:
            return ScaleFeatures(xs, (None,) * N_SCALES)
        rgb = self._as_input(rgb)
        if rgb.shape != band.shape:
            raise InputError(f"band {band.shape} and rgb {rgb.shape} differ")
        return ScaleFeatures(xs, tuple(self.b2(rgb)))

    def attend(self, feats: ScaleFeatures):
        if self.cfg.branch1_only:
            return ((None,) * 2, (None,) * 2, (feats.x[2], None))
        if self.xattn is None:
            return tuple((feats.x[i], feats.y[i]) for i in range(N_SCALES))
        return self.xattn(feats)

    def forward(self, band, rgb=None) -> Tensor:
        feats = self.features(band, rgb)
        attended = self.attend(feats)
        fcfg = self.cfg.fusion
        if self.cfg.branch1_only:
            fcfg = FusionConfig(fcfg.s_x, fcfg.s_y, 1, fcfg.hidden_nodes, fcfg.classes, fcfg.downsample_order)
        return fuse_and_classify(attended, fcfg, self.fusion, self.head)


def build_model(variant_or_cfg, seed: int = 0, **kw) -> RecaptureNet:
    cfg = variant_or_cfg if isinstance(variant_or_cfg, ModelConfig) else ModelConfig.for_variant(variant_or_cfg, **kw)
    return RecaptureNet(cfg, seed)
