"""Small layer/module toolkit on top of :mod:`recapdet.tensor`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


class Module:
    """Container that discovers parameters, buffers and children by attribute.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; buffers
    are :class:`RunningStats`.  Names are dotted paths in attribute order.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, RunningStats):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0, dtype=np.float64) -> Tensor:
    """U(-b, b) with b = gain / sqrt(fan_in)."""
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, gain: float = np.sqrt(6.0), dtype=np.float64):
        fan_in = c_in * kernel * kernel
        self.weight = uniform_fan_in(rng, (c_out, c_in, kernel, kernel), fan_in, gain, dtype)
        self.bias = uniform_fan_in(rng, (c_out,), fan_in, 1.0, dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats.create(channels, momentum, eps, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.weight, self.bias, self.stats, "train" if self.training else "eval")


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float64, zero: bool = False):
        self.weight = uniform_fan_in(rng, (d_out, d_in), d_in, 1.0, dtype)
        self.bias = uniform_fan_in(rng, (d_out,), d_in, 1.0, dtype)
        if zero:
            self.weight.data[...] = 0
            self.bias.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def state_dict(module: Module) -> dict[str, np.ndarray]:
    """Flat name -> array map of parameters plus running statistics."""
    out = {name: p.data for name, p in module.named_parameters()}
    for name, st in module.named_buffers():
        out[f"{name}.running_mean"] = st.mean
        out[f"{name}.running_var"] = st.var
    return out


def load_state_dict(module: Module, state: dict[str, np.ndarray], strict: bool = True) -> None:
    from .errors import ConfigError

    own = dict(module.named_parameters())
    bufs = dict(module.named_buffers())
    expected = set(own) | {f"{b}.running_{s}" for b in bufs for s in ("mean", "var")}
    missing = expected - set(state)
    extra = set(state) - expected
    if strict and (missing or extra):
        raise ConfigError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    for name, p in own.items():
        if name in state:
            if tuple(state[name].shape) != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.asarray(state[name], dtype=p.dtype).copy()
    for name, st in bufs.items():
        if f"{name}.running_mean" in state:
            st.mean = np.asarray(state[f"{name}.running_mean"], dtype=st.mean.dtype).copy()
            st.var = np.asarray(state[f"{name}.running_var"], dtype=st.var.dtype).copy()


def relu(x: Tensor) -> Tensor:
    return T.relu(x)


def first_param(module: Module) -> Optional[Tensor]:
    return next(iter(module.parameters()), None)
