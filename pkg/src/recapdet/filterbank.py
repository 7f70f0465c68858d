"""Frequency filter-bank preprocessing.

RGB -> grayscale -> 2-D DCT -> three anti-diagonal band masks -> inverse DCT
per band -> (low, mid, high) stacked as three channels. The three channels
sum back to the grayscale image because the masks partition the DCT plane.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .tensor import bilinear_matrix

DEFAULT_SIDE = 224
DEFAULT_K = 10
# ITU-R BT.601 luma weights.
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class BandMasks:
    k: int
    n: int
    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.low, self.mid, self.high])


@dataclass
class BandImage:
    channels: np.ndarray  # (3, n, n), ordered low, mid, high
    source_hash: str = ""

    @property
    def low(self) -> np.ndarray:
        return self.channels[0]

    @property
    def mid(self) -> np.ndarray:
        return self.channels[1]

    @property
    def high(self) -> np.ndarray:
        return self.channels[2]


@functools.lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis: row u holds the u-th cosine."""
    x = np.arange(n)
    u = np.arange(n)[:, None]
    c = np.cos(np.pi * (2 * x[None, :] + 1) * u / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    c.setflags(write=False)
    return c


def _check_square(a: np.ndarray, what: str) -> int:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"{what}: expected a square matrix, got shape {a.shape}")
    return a.shape[-1]


def dct2d(gray: np.ndarray) -> np.ndarray:
    """Orthonormal type-II 2-D DCT (rows, then columns). Leading axes are batched."""
    gray = np.asarray(gray, dtype=np.float64)
    c = dct_matrix(_check_square(gray, "dct2d"))
    return c @ gray @ c.T


def idct2d(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct2d` (orthonormal type-III)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    c = dct_matrix(_check_square(coeffs, "idct2d"))
    return c.T @ coeffs @ c


@functools.lru_cache(maxsize=16)
def make_band_masks(k: int = DEFAULT_K, n: int = DEFAULT_SIDE) -> BandMasks:
    """Binary low/mid/high masks on the n x n DCT plane, split on i + j.

    Indices are zero-based so the DC coefficient (0, 0) falls in the low band.
    """
    if not isinstance(k, (int, np.integer)) or k <= 0:
        raise ConfigError(f"filter-bank threshold k must be a positive integer, got {k!r}")
    if n < 2 or k > n - 1:
        raise ConfigError(f"k={k} leaves an empty band for side n={n} (need k <= n - 1)")
    s = np.add.outer(np.arange(n), np.arange(n))
    low = (s < k).astype(np.uint8)
    mid = ((s >= k) & (s < 2 * k)).astype(np.uint8)
    high = (s >= 2 * k).astype(np.uint8)
    for m in (low, mid, high):
        m.setflags(write=False)
    return BandMasks(k=int(k), n=n, low=low, mid=mid, high=high)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of an (H, W) or (H, W, C) float array."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img
    mh = bilinear_matrix(h, out_h)
    mw = bilinear_matrix(w, out_w)
    if img.ndim == 2:
        return mh @ img @ mw.T
    return np.einsum("ah,hwc,bw->abc", mh, img, mw, optimize=True)


def to_grayscale(rgb: np.ndarray, n: int = DEFAULT_SIDE) -> np.ndarray:
    """BT.601 grayscale in [0, 1], resized (bilinear) to n x n."""
    rgb = np.asarray(rgb)
    if rgb.size == 0:
        raise InputError("empty image")
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    if rgb.ndim != 3 or rgb.shape[2] not in (3, 4):
        raise InputError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    img = rgb[..., :3].astype(np.float64) / 255.0
    gray = img @ GRAY_WEIGHTS
    return resize_bilinear(gray, n, n)


def decompose(gray: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Split a square grayscale matrix (or a batch of them) into (low, mid, high)."""
    n = _check_square(np.asarray(gray), "decompose")
    masks = make_band_masks(k, n).stack().astype(np.float64)
    coeffs = dct2d(gray)
    if coeffs.ndim == 2:
        return idct2d(coeffs[None] * masks)
    return idct2d(coeffs[:, None] * masks[None])


def filter_bank_preprocess(rgb: np.ndarray, k: int = DEFAULT_K, n: int = DEFAULT_SIDE) -> BandImage:
    """Full preprocessing chain for one RGB uint8 image."""
    rgb = np.asarray(rgb)
    gray = to_grayscale(rgb, n)
    digest = hashlib.sha256(np.ascontiguousarray(rgb).tobytes()).hexdigest()
    return BandImage(channels=decompose(gray, k), source_hash=digest)


def band_energy(channels: np.ndarray) -> np.ndarray:
    """Sum of squares per band channel."""
    return np.sum(np.asarray(channels, dtype=np.float64) ** 2, axis=(-2, -1))


def high_band_energy(rgb: np.ndarray, k: int = DEFAULT_K, n: int | None = None) -> float:
    """Energy of the DCT coefficients in the high band of the grayscale image."""
    n = n or min(np.asarray(rgb).shape[:2])
    coeffs = dct2d(to_grayscale(rgb, n))
    return float(np.sum(coeffs**2 * make_band_masks(k, n).high))


# -- I/O --------------------------------------------------------------------

def decode_image(path: Union[str, Path]) -> np.ndarray:
    """Read PNG/JPEG/TIFF into an H x W x 3 uint8 array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc


def save_band_image(path: Union[str, Path], band: BandImage) -> None:
    """Persist as a float32 (3, n, n) .npy file."""
    np.save(Path(path), band.channels.astype(np.float32))


def load_band_image(path: Union[str, Path]) -> BandImage:
    return BandImage(channels=np.load(Path(path)).astype(np.float64))


def save_triptych(path: Union[str, Path], band: BandImage) -> None:
    """8-bit side-by-side visualisation, each band min-max stretched on its own."""
    from PIL import Image

    panels = []
    for ch in band.channels:
        lo, hi = float(ch.min()), float(ch.max())
        scaled = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
        panels.append(np.round(scaled * 255).astype(np.uint8))
    Image.fromarray(np.concatenate(panels, axis=1)).save(path)
