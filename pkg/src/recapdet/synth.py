"""Synthetic document corpus with genuine/recaptured pairs.

Genuine samples are single captures of a rendered document template.
Recaptured samples go through a second display/camera pass that blurs,
resamples, mixes colour channels and adds noise. Two device profiles draw
recapture parameters from disjoint ranges, standing in for two datasets
collected with different devices. JPEG duplicates give the cross-quality
condition.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, CorpusIOError, InputError
from .filterbank import resize_bilinear

GENUINE, RECAPTURED = 0, 1
LABEL_NAMES = {GENUINE: "genuine", RECAPTURED: "recaptured"}
LOSSLESS = "lossless"
DEFAULT_JPEG_Q = 75
MANIFEST_VERSION = 1

# Disjoint parameter ranges per device profile.
DEVICE_RANGES = {
    0: dict(blur=(0.6, 1.0), resample=(0.76, 0.90), mix=(0.05, 0.10), noise=(1.0, 2.0)),
    1: dict(blur=(1.05, 1.5), resample=(0.60, 0.74), mix=(0.11, 0.16), noise=(2.0, 3.0)),
}


def jpeg_tag(q: int) -> str:
    return f"jpeg{int(q)}"


def parse_quality(tag: str) -> Optional[int]:
    """None for lossless, else the JPEG quality factor."""
    if tag == LOSSLESS:
        return None
    if tag.startswith("jpeg") and tag[4:].isdigit():
        return int(tag[4:])
    raise InputError(f"unknown quality tag {tag!r}")


@dataclass
class LabeledSample:
    image: np.ndarray  # H x W x 3 uint8
    label: int
    template_id: int
    quality: str = LOSSLESS
    device_profile: int = 0
    idx: int = -1
    source_idx: int = -1
    split: str = ""
    path: str = ""
    encoded: Optional[bytes] = field(default=None, repr=False)

    def record(self) -> dict:
        return {
            "idx": self.idx,
            "path": self.path,
            "label": self.label,
            "template_id": self.template_id,
            "quality": self.quality,
            "device_profile": self.device_profile,
            "source_idx": self.source_idx,
            "split": self.split,
            "sha256": content_hash(self.image),
        }


def content_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()


@dataclass
class RecaptureProfile:
    """Parameters of one simulated display-and-recapture pass.

    ``blur_sigma == 0`` and ``resample_factor == 1`` disable the respective
    step; otherwise blur_sigma must lie in [0.5, 3] and resample_factor in
    (0.5, 1).
    """

    blur_sigma: float = 1.0
    color_matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    resample_factor: float = 0.8
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.color_matrix = np.asarray(self.color_matrix, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if not (self.blur_sigma == 0 or 0.5 <= self.blur_sigma <= 3.0):
            raise ConfigError(f"blur_sigma must be 0 or in [0.5, 3], got {self.blur_sigma}")
        if not (self.resample_factor == 1.0 or 0.5 < self.resample_factor < 1.0):
            raise ConfigError(f"resample_factor must be in (0.5, 1) or exactly 1, got {self.resample_factor}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.color_matrix.shape != (3, 3):
            raise ConfigError(f"color_matrix must be 3x3, got {self.color_matrix.shape}")
        if np.any(np.abs(self.color_matrix.sum(axis=1) - 1.0) > 0.1):
            raise ConfigError("color_matrix rows must sum to 1 +/- 0.1")

    @classmethod
    def identity(cls, seed: int = 0) -> "RecaptureProfile":
        return cls(0.0, np.eye(3), 1.0, 0.0, seed)

    @classmethod
    def sample(cls, device: int, rng: np.random.Generator) -> "RecaptureProfile":
        if device not in DEVICE_RANGES:
            raise ConfigError(f"unknown device profile {device}")
        r = DEVICE_RANGES[device]
        mix = rng.uniform(*r["mix"])
        cast = rng.dirichlet(np.ones(3), size=3)
        gains = rng.uniform(0.96, 1.04, size=3)
        matrix = ((1.0 - mix) * np.eye(3) + mix * cast) * gains[:, None]
        return cls(
            blur_sigma=float(rng.uniform(*r["blur"])),
            color_matrix=matrix,
            resample_factor=float(rng.uniform(*r["resample"])),
            noise_sigma=float(rng.uniform(*r["noise"])),
            seed=int(rng.integers(2**31)),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["color_matrix"] = self.color_matrix.tolist()
        return d


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _smooth_noise(rng, size: int, scale: float) -> np.ndarray:
    return gaussian_filter(rng.standard_normal((size, size)), scale)


def render_template(template_id: int, size: int = 224, seed: int = 0) -> np.ndarray:
    """Render one document-like page: paper texture, header, text lines,
    rules, a photo box and a stamp, with a layout drawn from (seed, id)."""
    if size < 32:
        raise ConfigError(f"template size must be >= 32, got {size}")
    rng = np.random.default_rng([seed, template_id, 7])
    u = size / 224.0

    paper = rng.uniform(228, 250, size=3)
    tex = _smooth_noise(rng, size, 2.0)
    img = np.empty((size, size, 3))
    img[:] = paper
    img += 6.0 * (tex / (np.abs(tex).max() + 1e-9))[..., None]

    ink = rng.uniform(10, 60, size=3)
    accent = rng.uniform(40, 200, size=3)
    accent[rng.integers(3)] = rng.uniform(150, 230)

    # header band
    hh = int(rng.integers(int(14 * u), int(26 * u)))
    img[: hh] = accent
    # photo box on the left or right
    pw, ph = int(rng.integers(int(40 * u), int(60 * u))), int(rng.integers(int(50 * u), int(70 * u)))
    left = bool(rng.integers(2))
    px = int(8 * u) if left else size - pw - int(8 * u)
    py = hh + int(rng.integers(int(8 * u), int(20 * u)))
    yy, xx = np.mgrid[0:ph, 0:pw]
    face = 120 + 60 * np.exp(-(((xx - pw / 2) / (pw / 3.5)) ** 2 + ((yy - ph / 2.4) / (ph / 4)) ** 2))
    photo = np.stack([face * c for c in rng.uniform(0.7, 1.1, 3)], axis=-1)
    img[py:py + ph, px:px + pw] = photo

    # text lines with glyph-like strokes
    x0 = int(8 * u) if not left else px + pw + int(8 * u)
    x1 = size - int(8 * u) if left else px - int(8 * u)
    y = hh + int(6 * u)
    pitch = int(rng.integers(max(5, int(9 * u)), max(7, int(13 * u))))
    glyph_h = max(3, int(rng.integers(int(4 * u), int(6 * u)) if u >= 1 else 3))
    while y + glyph_h < size - int(6 * u):
        full_width = y > py + ph + int(4 * u)
        lx0, lx1 = (int(8 * u), size - int(8 * u)) if full_width else (x0, x1)
        x = lx0 + int(rng.integers(0, int(10 * u) + 1))
        end = lx1 - int(rng.integers(0, int(40 * u) + 1))
        while x < end:
            wlen = int(rng.integers(3, max(4, int(18 * u))))
            wlen = min(wlen, end - x)
            strokes = rng.random((glyph_h, wlen)) < 0.55
            strokes[:, ::2] |= rng.random(wlen)[::2] < 0.5
            region = img[y:y + glyph_h, x:x + wlen]
            region[strokes] = ink
            x += wlen + int(rng.integers(2, max(3, int(5 * u))))
        y += pitch
        if rng.random() < 0.12:
            img[y - 2:y - 1, lx0:lx1] = ink  # rule
            y += int(3 * u)

    # stamp ring
    cr = rng.uniform(14 * u, 24 * u)
    cx, cy = rng.uniform(cr + 4, size - cr - 4, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(xx - cx, yy - cy)
    ring = (np.abs(dist - cr) < 1.6 * max(u, 0.6)) | (np.abs(dist - 0.7 * cr) < 0.8 * max(u, 0.6))
    stamp_color = np.array([200.0, 40.0, 50.0]) if rng.random() < 0.5 else np.array([40.0, 60.0, 190.0])
    img[ring] = 0.35 * img[ring] + 0.65 * stamp_color
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def gen_templates(n_templates: int, size: int = 224, seed: int = 0) -> list[np.ndarray]:
    if n_templates < 2:
        raise ConfigError(f"need at least 2 templates, got {n_templates}")
    return [render_template(t, size, seed) for t in range(n_templates)]


def capture(img: np.ndarray, rng: np.random.Generator, device: int = 0) -> np.ndarray:
    """A single camera capture: small shift, exposure jitter, sensor noise."""
    out = img.astype(np.float64)
    dy, dx = rng.integers(-2, 3, size=2)
    out = np.roll(out, (int(dy), int(dx)), axis=(0, 1))
    gain = rng.uniform(0.94, 1.04) if device == 0 else rng.uniform(0.9, 1.0)
    offset = rng.uniform(-6, 6)
    out = out * gain + offset
    out += rng.normal(0.0, rng.uniform(0.8, 1.8), size=out.shape)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def recapture(img: np.ndarray, profile: RecaptureProfile) -> np.ndarray:
    """Blur -> down/up bilinear resample -> colour mixing (clamped) -> noise."""
    profile.validate()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 image, got {img.shape}")
    h, w = img.shape[:2]
    out = img.astype(np.float64)
    if profile.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(profile.blur_sigma, profile.blur_sigma, 0), mode="reflect")
    if profile.resample_factor != 1.0:
        sh = max(1, int(round(h * profile.resample_factor)))
        sw = max(1, int(round(w * profile.resample_factor)))
        out = resize_bilinear(resize_bilinear(out, sh, sw), h, w)
    out = np.clip(out @ profile.color_matrix.T, 0.0, 255.0)
    if profile.noise_sigma > 0:
        out = out + np.random.default_rng(profile.seed).normal(0.0, profile.noise_sigma, size=out.shape)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# corpus assembly
# ---------------------------------------------------------------------------

def make_samples(templates: Sequence[np.ndarray], per_template: int, device: int, seed: int,
                 start_idx: int = 0) -> list[LabeledSample]:
    """``per_template`` samples per template, alternating genuine/recaptured."""
    out: list[LabeledSample] = []
    idx = start_idx
    for tid, tpl in enumerate(templates):
        rng = np.random.default_rng([seed, tid, device, 11])
        last_genuine = -1
        for i in range(per_template):
            shot = capture(tpl, rng, device)
            if i % 2 == 0:
                out.append(LabeledSample(shot, GENUINE, tid, LOSSLESS, device, idx))
                last_genuine = idx
            else:
                prof = RecaptureProfile.sample(device, rng)
                out.append(LabeledSample(recapture(shot, prof), RECAPTURED, tid, LOSSLESS, device, idx,
                                         source_idx=last_genuine))
            idx += 1
    return out


def encode_jpeg(image: np.ndarray, q: int) -> bytes:
    """Baseline JPEG with 4:4:4 chroma, so the loss is governed by ``q`` alone."""
    buf = io.BytesIO()
    try:
        Image.fromarray(image).save(buf, format="JPEG", quality=int(q), subsampling=0)
    except (OSError, ValueError) as exc:
        raise CorpusIOError(f"JPEG encode failed: {exc}") from exc
    return buf.getvalue()


def decode_bytes(blob: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(blob)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise CorpusIOError(f"image decode failed: {exc}") from exc


def jpeg_duplicate(samples: Iterable[LabeledSample], q: int = DEFAULT_JPEG_Q,
                   start_idx: Optional[int] = None) -> list[LabeledSample]:
    """Encode/decode every sample at JPEG quality ``q``; labels and ids kept."""
    if not 1 <= int(q) <= 100:
        raise ConfigError(f"JPEG quality must be in [1, 100], got {q}")
    out = []
    for n, s in enumerate(samples):
        blob = encode_jpeg(s.image, q)
        new_idx = s.idx if start_idx is None else start_idx + n
        out.append(replace(s, image=decode_bytes(blob), quality=jpeg_tag(q), idx=new_idx,
                           path="", encoded=blob))
    return out


def make_splits(samples: Iterable[LabeledSample], train_templates: Iterable[int],
                eval_templates: Iterable[int]) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Partition by document template; the two template sets must be disjoint."""
    tr, ev = set(train_templates), set(eval_templates)
    overlap = tr & ev
    if overlap:
        raise ConfigError(f"templates {sorted(overlap)} appear in both splits")
    samples = list(samples)
    train = [s for s in samples if s.template_id in tr]
    evals = [s for s in samples if s.template_id in ev]
    return train, evals


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(255.0**2 / mse))


# ---------------------------------------------------------------------------
# on-disk corpus
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    n_templates: int = 12
    per_template: int = 40
    seed: int = 0
    jpeg_q: int = DEFAULT_JPEG_Q
    size: int = 224
    split: tuple[int, int, int] = (8, 2, 2)  # train / val / test templates
    devices: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        self.split = tuple(int(v) for v in self.split)
        self.devices = tuple(int(v) for v in self.devices)
        if sum(self.split) != self.n_templates or min(self.split) < 1:
            raise ConfigError(f"split {self.split} must cover all {self.n_templates} templates")
        if self.per_template < 2:
            raise ConfigError("per_template must be >= 2")

    def split_of(self, template_id: int) -> str:
        a, b, _ = self.split
        if template_id < a:
            return "train"
        return "val" if template_id < a + b else "test"

    def templates_in(self, split: str) -> list[int]:
        return [t for t in range(self.n_templates) if self.split_of(t) == split]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["devices"] = list(self.devices)
        return d


def build_samples(cfg: CorpusConfig) -> list[LabeledSample]:
    """All samples (every device, lossless and JPEG) in memory."""
    templates = gen_templates(cfg.n_templates, cfg.size, cfg.seed)
    samples: list[LabeledSample] = []
    for dev in cfg.devices:
        samples += make_samples(templates, cfg.per_template, dev, cfg.seed, start_idx=len(samples))
    samples += jpeg_duplicate(list(samples), cfg.jpeg_q, start_idx=len(samples))
    for s in samples:
        s.split = cfg.split_of(s.template_id)
    return samples


def write_corpus(root: Union[str, Path], cfg: CorpusConfig) -> list[LabeledSample]:
    """Generate and write ``root/{split}/{label}/{template}/{idx}.png|jpg`` plus
    ``root/manifest.json``."""
    root = Path(root)
    samples = build_samples(cfg)
    for s in samples:
        ext = "png" if s.quality == LOSSLESS else "jpg"
        rel = Path(s.split) / LABEL_NAMES[s.label] / f"{s.template_id:02d}" / f"{s.idx:05d}.{ext}"
        s.path = rel.as_posix()
        dest = root / rel
        try:
            dest.parent.mkdir(parents=True, exist_ok=True)
            if s.encoded is not None:
                dest.write_bytes(s.encoded)
            else:
                Image.fromarray(s.image).save(dest, format="PNG")
        except OSError as exc:
            raise CorpusIOError(f"cannot write {dest}: {exc}") from exc
    manifest = {
        "version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "samples": [s.record() for s in samples],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return samples


def read_manifest(root: Union[str, Path]) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusIOError(f"cannot read manifest {path}: {exc}") from exc


def load_corpus(root: Union[str, Path], verify: bool = True) -> tuple[CorpusConfig, list[LabeledSample]]:
    """Read every sample listed in the manifest back from disk."""
    root = Path(root)
    man = read_manifest(root)
    cfg_d = dict(man["config"])
    cfg = CorpusConfig(**cfg_d)
    samples = []
    for rec in man["samples"]:
        path = root / rec["path"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CorpusIOError(f"manifest lists missing file {path}") from exc
        img = decode_bytes(blob)
        if verify and content_hash(img) != rec["sha256"]:
            raise CorpusIOError(f"content hash mismatch for {path}")
        samples.append(LabeledSample(
            image=img, label=int(rec["label"]), template_id=int(rec["template_id"]),
            quality=rec["quality"], device_profile=int(rec["device_profile"]), idx=int(rec["idx"]),
            source_idx=int(rec["source_idx"]), split=rec["split"], path=rec["path"],
        ))
    return cfg, samples
