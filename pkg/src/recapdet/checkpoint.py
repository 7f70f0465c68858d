"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic       4 bytes   b"RCDT"
    version     uint32    FORMAT_VERSION
    hash_len    uint16    length of the config hash
    hash        ascii     sha256 hex digest of the canonical config JSON
    config_len  uint32    length of the config JSON
    config      utf-8     the run config, verbatim
    count       uint32    number of entries
    count x entry:
        name_len  uint16
        name      utf-8
        ndim      uint8
        dims      ndim x uint32
        values    prod(dims) x float32, row-major

See docs/checkpoint_format.md for the naming scheme.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import numpy as np

from .errors import InputError

MAGIC = b"RCDT"
FORMAT_VERSION = 1


def config_hash(config: dict[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    config_hash: str = ""
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    h = ckpt.config_hash.encode("ascii")
    buf.write(struct.pack("<H", len(h)))
    buf.write(h)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        nb = name.encode()
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise InputError("checkpoint truncated")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<H", take(2))
    chash = take(hlen).decode("ascii")
    (clen,) = struct.unpack("<I", take(4))
    config = json.loads(take(clen).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    return Checkpoint(config=config, tensors=tensors, config_hash=chash, version=version)


def save(path: Union[str, Path], ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(ckpt))


def load(path: Union[str, Path]) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
