"""Binary checkpoint format.

Layout (little-endian)::

    b"TFTC" | version u16 | meta_len u32 | meta (UTF-8 JSON)
    | count u32 | count x parameter record
    | adam_step u64 | n_moments u32 | n_moments x (name, m payload, v payload)
    | crc32 u32 over all preceding bytes

A parameter record is ``name_len u16, name, trainable u8, ndim u8,
dims u32 x ndim, float32 payload``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"TFTC"
VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    adam: AdamState
    meta: dict = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", int(ckpt.trainable.get(name, True)), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_f32(arr))
    names = [n for n in ckpt.params if n in ckpt.adam.m]
    parts.append(struct.pack("<QI", ckpt.adam.step, len(names)))
    for name in names:
        parts += [_pack_str(name), _f32(ckpt.adam.m[name]), _f32(ckpt.adam.v[name])]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("bad name encoding") from exc

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def deserialize_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError("bad checkpoint metadata") from exc
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    for _ in range(count):
        name = r.string()
        flag, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        params[name] = r.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        trainable[name] = bool(flag)
    step, n_moments = r.unpack("<QI")
    adam = AdamState(step=step)
    for _ in range(n_moments):
        name = r.string()
        if name not in params:
            raise FormatError(f"optimizer state for unknown parameter {name!r}")
        size = params[name].size
        adam.m[name] = r.floats(size).reshape(params[name].shape)
        adam.v[name] = r.floats(size).reshape(params[name].shape)
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return Checkpoint(params, trainable, adam, meta)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(serialize_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return deserialize_checkpoint(Path(path).read_bytes())
