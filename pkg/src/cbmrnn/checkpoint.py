"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"CBMCKPT\\0"
    version    u32
    epoch      u32      number of completed epochs
    text x 2   u32 length + UTF-8: run config, JSON training state
    count      u32      number of tensors
    tensors    count x (u32 name length, UTF-8 name, u32 ndim,
                        ndim x u64 dims, prod(dims) x f64 little-endian)

Tensor names are ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` and
``store/<sequence>/<layer>/<t>``.  The JSON state holds the Adam step
count, the learning-rate schedule and the bit-generator states.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CBMCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    config_text: str
    state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _text(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def to_bytes(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, ckpt.epoch))
    _text(fh, ckpt.config_text)
    _text(fh, json.dumps(ckpt.state, sort_keys=True))
    fh.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8")
        _text(fh, name)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())
    return fh.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.off, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    version, epoch = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, expected {VERSION}")
    config_text = r.text()
    state = json.loads(r.text())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.text()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if r.off != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.off} trailing bytes")
    return Checkpoint(epoch, config_text, state, tensors)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))
