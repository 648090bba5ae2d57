"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    magic "CDFSLCKP"
    format_version
    len + config digest (utf-8)
    len + stage tag (utf-8)
    epoch
    entry count
    per entry: len + name, rank, shape[rank], raw float64 LE values
    len + JSON metadata (may be "{}")

Round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .params import ModelParams
from .tensor import Tensor

MAGIC = b"CDFSLCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    digest: str
    stage: str
    epoch: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def params(self, prefix: str) -> ModelParams:
        return ModelParams.from_arrays(self.section(prefix))


def pack(sections: dict[str, dict[str, np.ndarray] | ModelParams]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, entries in sections.items():
        for name, value in entries.items():
            out[f"{prefix}/{name}"] = value.data if isinstance(value, Tensor) else np.asarray(value)
    return out


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(ckpt.format_version))
    buf.write(_str(ckpt.digest))
    buf.write(_str(ckpt.stage))
    buf.write(_u32(ckpt.epoch))
    buf.write(_u32(len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        buf.write(_str(name))
        buf.write(_u32(arr.ndim))
        for n in arr.shape:
            buf.write(_u32(n))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(_str(json.dumps(ckpt.meta, sort_keys=True)))
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValidationError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise ValidationError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {version}")
    digest, stage, epoch = r.str(), r.str(), r.u32()
    tensors = {}
    for _ in range(r.u32()):
        name = r.str()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    meta = json.loads(r.str())
    if r.pos != len(raw):
        raise ValidationError("trailing bytes after checkpoint")
    return Checkpoint(digest, stage, epoch, tensors, meta, version)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
