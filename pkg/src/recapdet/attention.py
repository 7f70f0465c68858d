"""Residual cross-attention between the two branches.

    out = softmax_rows((x * Wq)(y * Wk)^T) (y * Wv) + x

where ``*`` is a 1x1 convolution and the product runs over the H*W spatial
tokens (row-major, H then W) with channels as the embedding. No 1/sqrt(C)
temperature unless ``scale_scores`` is set.
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .nn import Module, uniform_fan_in
from .tensor import Tensor, add, attention_core, conv2d, matmul, mul, reshape, softmax_rows, transpose

DIRECTIONS = ("fwd", "rev")


class AttnWeights(Module):
    """Query/key/value 1x1 kernels, each (C, C, 1, 1)."""

    def __init__(self, rng, channels: int, dtype=np.float64):
        self.q = uniform_fan_in(rng, (channels, channels, 1, 1), channels, 1.0, dtype)
        self.k = uniform_fan_in(rng, (channels, channels, 1, 1), channels, 1.0, dtype)
        self.v = uniform_fan_in(rng, (channels, channels, 1, 1), channels, 1.0, dtype)

    @classmethod
    def from_arrays(cls, q, k, v) -> "AttnWeights":
        w = cls.__new__(cls)
        for name, arr in (("q", q), ("k", k), ("v", v)):
            arr = np.asarray(arr)
            if arr.ndim == 2:
                arr = arr[:, :, None, None]
            setattr(w, name, Tensor(arr, requires_grad=True))
        return w


def _tokens(t: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C)."""
    n, c, h, w = t.shape
    return transpose(reshape(t, (n, c, h * w)), (0, 2, 1))


def attention_reference(q: Tensor, k: Tensor, v: Tensor, scale: float = 1.0) -> Tensor:
    """Same as :func:`attention_core`, composed from generic tape ops."""
    scores = matmul(q, k)
    if scale != 1.0:
        scores = mul(scores, Tensor(np.asarray(scale, dtype=scores.dtype)))
    return matmul(softmax_rows(scores), v)


def cross_attend(x: Tensor, y: Tensor, w: AttnWeights, scale_scores: bool = False) -> Tensor:
    """Attend from ``x`` (queries) to ``y`` (keys, values), plus residual ``x``.

    Accepts (C, H, W) or (N, C, H, W); ``x`` and ``y`` must match.
    """
    if x.shape != y.shape:
        raise InputError(f"cross_attend: x {x.shape} and y {y.shape} differ")
    if x.ndim not in (3, 4):
        raise InputError(f"cross_attend: expected 3-D or 4-D features, got {x.shape}")
    single = x.ndim == 3
    xb = reshape(x, (1,) + x.shape) if single else x
    yb = reshape(y, (1,) + y.shape) if single else y
    n, c, h, wd = xb.shape
    if w.q.shape[:2] != (c, c):
        raise InputError(f"cross_attend: weights {w.q.shape} do not match {c} channels")

    q = _tokens(conv2d(xb, w.q))                      # (N, T, C)
    k = reshape(conv2d(yb, w.k), (n, c, h * wd))       # (N, C, T)
    v = _tokens(conv2d(yb, w.v))                      # (N, T, C)
    ctx = attention_core(q, k, v, 1.0 / np.sqrt(c) if scale_scores else 1.0)  # (N, T, C)
    ctx = reshape(transpose(ctx, (0, 2, 1)), (n, c, h, wd))
    out = add(ctx, xb)
    return reshape(out, x.shape) if single else out


def attend_all(
    feats,
    w_fwd: Mapping[int, AttnWeights] | Sequence[Optional[AttnWeights]],
    w_rev: Mapping[int, AttnWeights] | Sequence[Optional[AttnWeights]],
    scales: Sequence[int] = (1, 2, 3),
    scale_scores: bool = False,
):
    """Cross-attend both directions at each requested scale (1-based).

    Returns a 3-tuple of ``(x_att, y_att)`` pairs; unrequested scales are None.
    """
    out: list = [None, None, None]
    for i in scales:
        wf = _lookup(w_fwd, i)
        wr = _lookup(w_rev, i)
        if wf is None or wr is None:
            raise ConfigError(f"missing cross-attention weights for scale {i}")
        x_i, y_i = feats.x[i - 1], feats.y[i - 1]
        out[i - 1] = (
            cross_attend(x_i, y_i, wf, scale_scores),
            cross_attend(y_i, x_i, wr, scale_scores),
        )
    return tuple(out)


def _lookup(weights, i: int):
    if isinstance(weights, Mapping):
        return weights.get(i)
    return weights[i - 1] if i - 1 < len(weights) else None


class ScaleAttention(Module):
    def __init__(self, rng, channels: int, dtype=np.float64):
        self.fwd = AttnWeights(rng, channels, dtype)
        self.rev = AttnWeights(rng, channels, dtype)


class CrossAttention(Module):
    """Per-scale, per-direction weight sets named ``s{i}.{fwd|rev}.{q|k|v}``."""

    def __init__(self, rng, channels: Sequence[int], scales: Sequence[int], dtype=np.float64,
                 scale_scores: bool = False):
        self.scales = tuple(scales)
        self.scale_scores = scale_scores
        for i in self.scales:
            setattr(self, f"s{i}", ScaleAttention(rng, channels[i - 1], dtype))

    def weights(self, direction: str) -> dict[int, AttnWeights]:
        return {i: getattr(getattr(self, f"s{i}"), direction) for i in self.scales}

    def forward(self, feats):
        return attend_all(feats, self.weights("fwd"), self.weights("rev"), self.scales, self.scale_scores)
