"""Dense n-dimensional tensors with a reverse-mode gradient tape.

Every operation returns a new :class:`Tensor`.  When gradient recording is
enabled and any input requires a gradient, the output keeps references to its
inputs together with a closure that pushes the output gradient back to them.
:meth:`Tensor.backward` walks that graph in reverse topological order.

Precision follows the inputs: float64 arrays stay float64 (used by all the
finite-difference checks), float32 arrays stay float32 (used for training).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, NumericError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "RunningStats",
    "no_grad",
    "is_grad_enabled",
    "add",
    "mul",
    "matmul",
    "relu",
    "reshape",
    "transpose",
    "concat",
    "softmax_rows",
    "attention_core",
    "conv2d",
    "maxpool2d",
    "avgpool_global",
    "bilinear_resize",
    "bilinear_matrix",
    "batchnorm",
    "cross_entropy",
    "linear",
]

DEFAULT_DTYPE = np.float64
# Source coordinate = (dst + 0.5) * in / out - 0.5 (half-pixel centres).
ALIGN_CORNERS = False

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional real array that can take part in the gradient tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), _wrap(-1.0, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, _wrap(-1.0, self.dtype)))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- gradient tape ----------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every tensor of the tape that requires one."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not retain_graph:
                    node._backward = None
                    node._parents = ()


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def bw(g):
        x._accumulate(g * mask)

    return _make(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, tensors, bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=x.dtype)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, in) and weight (out, in)."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    p = z

    def bw(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        x._accumulate(p * (g - dot))

    return _make(p, (x,), bw)


def attention_core(q: Tensor, k: Tensor, v: Tensor, scale: float = 1.0) -> Tensor:
    """``softmax_rows(scale * q @ k) @ v`` as one tape node.

    q: (N, T, C), k: (N, C, T), v: (N, T, Cv). Only the (N, T, T) attention
    matrix is kept for the backward pass, and samples are processed one at a
    time, so peak memory is one attention matrix per sample above that.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention_core: expected 3-D q, k, v, got {q.shape}, {k.shape}, {v.shape}")
    n, t, c = q.shape
    if k.shape != (n, c, t) or v.shape[:2] != (n, t):
        raise ShapeError(f"attention_core: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    dtype = np.result_type(q.dtype, k.dtype, v.dtype)
    probs = np.empty((n, t, t), dtype=dtype)
    out = np.empty((n, t, v.shape[2]), dtype=dtype)
    for i in range(n):
        s = q.data[i] @ k.data[i]
        if scale != 1.0:
            s *= scale
        smax = s.max(axis=1, keepdims=True)
        if np.isnan(smax).any():
            raise NumericError("attention_core: NaN in attention scores")
        s -= smax
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        probs[i] = s
        np.matmul(s, v.data[i], out=out[i])

    def bw(g):
        dq = np.empty_like(q.data) if q.requires_grad else None
        dk = np.empty_like(k.data) if k.requires_grad else None
        dv = np.empty_like(v.data) if v.requires_grad else None
        for i in range(n):
            p = probs[i]
            if dv is not None:
                dv[i] = p.T @ g[i]
            if dq is None and dk is None:
                continue
            ds = g[i] @ v.data[i].T
            ds -= np.sum(ds * p, axis=1, keepdims=True)
            ds *= p
            if scale != 1.0:
                ds *= scale
            if dq is not None:
                dq[i] = ds @ k.data[i].T
            if dk is not None:
                dk[i] = q.data[i].T @ ds
        for tens, grad in ((q, dq), (k, dk), (v, dv)):
            if grad is not None:
                tens._accumulate(grad)

    return _make(out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# spatial ops; all accept (C, H, W) or (N, C, H, W)
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeezed: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeezed else x


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Output side is ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    xb, squeezed = _as_batch(x)
    out = _conv2d_nchw(xb, w, stride, padding)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)))
    return _unbatch(out, squeezed)


def _conv2d_nchw(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0 or kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {padding}")

    wmat = w.data.reshape(cout, -1)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        xs = x.data.reshape(n, c, h * wd)
        out = np.matmul(wmat, xs).reshape(n, cout, h, wd)

        def bw(g):
            g3 = g.reshape(n, cout, h * wd)
            if w.requires_grad:
                gw = np.einsum("nop,ncp->oc", g3, xs)
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                x._accumulate(np.matmul(wmat.T, g3).reshape(x.shape))

        return _make(out, (x, w), bw)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _make(out, (x, w), bw)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over ``window x window`` patches. Gradient goes to the first maximum."""
    stride = stride or window
    xb, squeezed = _as_batch(x)
    n, c, h, wd = xb.shape
    if window > h or window > wd or window < 1:
        raise ShapeError(f"maxpool2d: window {window} does not fit input {x.shape}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    win = sliding_window_view(xb.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros(xb.shape, dtype=g.dtype)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == idx)
        xb._accumulate(dx)

    return _unbatch(_make(out, (xb,), bw), squeezed)


def avgpool_global(x: Tensor) -> Tensor:
    """Average each channel plane: (C,H,W) -> (C,), (N,C,H,W) -> (N,C)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"avgpool_global: expected 3-D or 4-D input, got {x.shape}")
    return tmean(x, axis=(-2, -1))


def bilinear_matrix(in_size: int, out_size: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Row-stochastic (out_size, in_size) interpolation matrix, half-pixel centres."""
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"bilinear: sizes must be positive, got {in_size}->{out_size}")
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for d in range(out_size):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the two trailing axes (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize: need at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = Tensor(bilinear_matrix(h, out_h, x.dtype))
    mw_t = Tensor(bilinear_matrix(w, out_w, x.dtype).T.copy())
    return matmul(matmul(mh, x), mw_t)


# ---------------------------------------------------------------------------
# normalisation and loss
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Running mean/variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats, mode: str = "train") -> Tensor:
    """Batch normalisation over (N,) for 2-D input or (N, H, W) for 4-D input.

    Train mode uses batch statistics and updates ``running_stats`` in place
    (unbiased variance, as the running estimate). Eval mode uses the running
    statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim == 2:
        axes: tuple[int, ...] = (0,)
        bshape = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm: expected 2-D or 4-D input, got {x.shape}")
    eps = running_stats.eps
    g = gamma.data.reshape(bshape)

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_stats.var.reshape(bshape) + eps)
        xhat = (x.data - running_stats.mean.reshape(bshape)) * inv_std
        out = (xhat * g + beta.data.reshape(bshape)).astype(x.dtype, copy=False)

        def bw_eval(gr):
            if x.requires_grad:
                x._accumulate(gr * g * inv_std)
            if gamma.requires_grad:
                gamma._accumulate(np.sum(gr * xhat, axis=axes))
            if beta.requires_grad:
                beta._accumulate(np.sum(gr, axis=axes))

        return _make(out, (x, gamma, beta), bw_eval)

    if x.shape[0] < 2:
        raise ConfigError("batchnorm in train mode needs a batch of at least 2")
    m = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    centred = x.data - mu
    var = np.mean(centred * centred, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * g + beta.data.reshape(bshape)

    mom = running_stats.momentum
    running_stats.mean *= 1.0 - mom
    running_stats.mean += mom * mu.reshape(-1)
    running_stats.var *= 1.0 - mom
    running_stats.var += mom * var.reshape(-1) * (m / (m - 1))

    def bw_train(gr):
        if x.requires_grad:
            dxhat = gr * g
            s1 = np.sum(dxhat, axis=axes, keepdims=True)
            s2 = np.sum(dxhat * xhat, axis=axes, keepdims=True)
            x._accumulate(inv_std / m * (m * dxhat - s1 - xhat * s2))
        if gamma.requires_grad:
            gamma._accumulate(np.sum(gr * xhat, axis=axes))
        if beta.requires_grad:
            beta._accumulate(np.sum(gr, axis=axes))

    return _make(out, (x, gamma, beta), bw_train)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class. 0 = genuine, 1 = recaptured."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (B, K), got {logits.shape}")
    y = np.asarray(labels)
    b, k = logits.shape
    if y.shape != (b,):
        raise InputError(f"cross_entropy: {y.shape[0] if y.ndim else 0} labels for batch of {b}")
    if not np.all((y == 0) | (y == 1)) or k < 2:
        raise InputError(f"cross_entropy: labels must be in {{0, 1}}, got {sorted(set(y.tolist()))}")
    y = y.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(b), y]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), y] -= 1.0
        logits._accumulate(p * (g / b))

    return _make(out, (logits,), bw)
