"""BPAW weight files.

Layout (all little-endian)::

    "BPAW" | u32 version=1 | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 dim | float32 data )
    optional trailer: "META" | u32 len | utf-8 JSON object

Entries are written in sorted name order so equal stores give equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE

MAGIC = b"BPAW"
META_MAGIC = b"META"
VERSION = 1


class WeightFormatError(ValueError):
    pass


@dataclass
class WeightStore:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def check(self, model) -> None:
        """Raise if any weight id the model needs is missing or has the wrong shape."""
        missing = sorted(set(model.param_shapes) - set(self.tensors))
        if missing:
            raise WeightFormatError(f"{model.name}: missing weight ids {missing}")
        for name, shape in model.param_shapes.items():
            got = self.tensors[name].shape
            if tuple(got) != tuple(shape):
                raise WeightFormatError(f"{model.name}: {name} has shape {got}, expected {shape}")


def to_bytes(store: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(store.tensors))]
    for name in sorted(store.tensors):
        arr = np.ascontiguousarray(store.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFormatError(f"entry {name!r} too large for the format")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    if store.meta:
        blob = json.dumps(store.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts.append(META_MAGIC + struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(
                f"truncated file: need {n} bytes for {what} at offset {self.pos}, {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> WeightStore:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version} at offset 4, expected {VERSION}")
    tensors = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"name length of entry {k}")
        name = r.take(n, f"name of entry {k}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(DTYPE).reshape(dims)
    meta = {}
    if r.pos < len(buf):
        if r.take(4, "trailer") != META_MAGIC:
            raise WeightFormatError(f"unexpected bytes at offset {r.pos - 4}")
        (n,) = r.unpack("<I", "metadata length")
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
        if r.pos != len(buf):
            raise WeightFormatError(f"trailing garbage at offset {r.pos}")
    return WeightStore(tensors, meta)


def save_weights(store: WeightStore, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(to_bytes(store))
    os.replace(tmp, path)


def load_weights(path, model=None) -> WeightStore:
    with open(path, "rb") as f:
        store = from_bytes(f.read())
    if model is not None:
        store.check(model)
    return store
