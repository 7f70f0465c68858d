"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-4, **kw) -> "AdamState":
        return cls(
            lr=lr,
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one Adam update in place. Parameters without a grad are skipped."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise UsageError(f"Adam state tracks {len(state.first_moment)} params, got {len(params)}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise UsageError(f"moment shape {m.shape} does not match parameter {p.shape}")
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
