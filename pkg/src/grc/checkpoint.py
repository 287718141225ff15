"""Versioned little-endian checkpoint files.

Layout (all integers unsigned little-endian)::

    magic      8 bytes  b"GRCCKPT\\x00"
    version    u32
    config     u32 length + UTF-8 run config (key = value text)
    step       u64
    params     u32 count, then per tensor:
                 u16 name length, name, u8 dtype code (0 f32, 1 f64),
                 u8 ndim, u32 dims..., row-major data
    caches     u32 count, then per cache: u32 length + cache record
               (see :func:`grc.cache.cache_to_bytes`)
    optimizer  u8 present; if 1: u64 t, u32 count, then per tensor the same
               name/dtype/shape header as params followed by m then v
    rng        u32 length + UTF-8 JSON of generator states

Cache gate weights live only in the cache records, not in ``params``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cache import cache_from_bytes, cache_to_bytes
from .errors import CheckpointError

MAGIC = b"GRCCKPT\x00"
VERSION = 1
_DT = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    config_text: str
    step: int
    params: dict[str, np.ndarray]
    caches: list[bytes]
    optimizer: Optional[dict] = None
    rng: dict = field(default_factory=dict)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self.take(s.size))
        return vals[0] if len(vals) == 1 else vals

    def dims(self, ndim: int) -> tuple:
        return tuple(struct.unpack(f"<{ndim}I", self.take(4 * ndim)))

    def tensor_header(self):
        name = self.take(self.unpack("H")).decode("utf-8")
        code, ndim = self.unpack("BB")
        if code not in _DT:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        return name, _DT[code], self.dims(ndim)

    def array(self, dtype: np.dtype, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(n * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def _write_array(out: list, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _CODE:
        raise CheckpointError(f"unsupported dtype {dt}")
    out.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def _write_header(out: list, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    out.append(struct.pack("<H", len(raw)) + raw)
    out.append(struct.pack("<BB", _CODE[np.dtype(arr.dtype)], arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))


def encode(ckpt: Checkpoint) -> bytes:
    out: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    cfg = ckpt.config_text.encode("utf-8")
    out.append(struct.pack("<I", len(cfg)) + cfg)
    out.append(struct.pack("<Q", ckpt.step))
    out.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_header(out, name, arr)
        _write_array(out, arr)
    out.append(struct.pack("<I", len(ckpt.caches)))
    for blob in ckpt.caches:
        out.append(struct.pack("<I", len(blob)) + blob)
    if ckpt.optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        m, v = ckpt.optimizer["m"], ckpt.optimizer["v"]
        out.append(struct.pack("<BQI", 1, ckpt.optimizer["t"], len(m)))
        for name in m:
            _write_header(out, name, m[name])
            _write_array(out, m[name])
            _write_array(out, v[name])
    rng = json.dumps(ckpt.rng, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(rng)) + rng)
    return b"".join(out)


def decode(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version = r.unpack("I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = r.take(r.unpack("I")).decode("utf-8")
    step = r.unpack("Q")
    params: dict[str, np.ndarray] = {}
    for _ in range(r.unpack("I")):
        name, dt, shape = r.tensor_header()
        params[name] = r.array(dt, shape)
    caches = [r.take(r.unpack("I")) for _ in range(r.unpack("I"))]
    optimizer = None
    if r.unpack("B"):
        t, count = r.unpack("QI")
        m, v = {}, {}
        for _ in range(count):
            name, dt, shape = r.tensor_header()
            m[name] = r.array(dt, shape)
            v[name] = r.array(dt, shape)
        optimizer = {"t": t, "m": m, "v": v}
    rng = json.loads(r.take(r.unpack("I")).decode("utf-8"))
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config_text, step, params, caches, optimizer, rng)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def model_checkpoint(model, config_text: str, step: int = 0, optimizer=None, rng: Optional[dict] = None) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters() if ".cache." not in name}
    caches = [cache_to_bytes(c) for c in model.caches()]
    opt = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt = {"t": sd["t"], "m": {k: a.copy() for k, a in sd["m"].items()},
               "v": {k: a.copy() for k, a in sd["v"].items()}}
    return Checkpoint(config_text, step, params, caches, opt, rng or {})


def restore_into(model, ckpt: Checkpoint, optimizer=None) -> None:
    """Load parameters, caches and (optionally) optimizer moments into ``model``."""
    named = dict(model.named_parameters())
    for name, arr in ckpt.params.items():
        if name not in named:
            raise CheckpointError(f"checkpoint parameter {name!r} not in model")
        if named[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {named[name].shape}")
        named[name].data = arr.astype(named[name].dtype, copy=True)
    caches = model.caches()
    if len(caches) != len(ckpt.caches):
        raise CheckpointError(f"checkpoint has {len(ckpt.caches)} caches, model has {len(caches)}")
    for cache, blob in zip(caches, ckpt.caches):
        cache_from_bytes(blob, cache)
    if optimizer is not None and ckpt.optimizer is not None:
        missing = set(optimizer.state_dict()["m"]) - set(ckpt.optimizer["m"])
        if missing:
            raise CheckpointError(f"optimizer state missing for {sorted(missing)[:3]}")
        optimizer.load_state_dict(ckpt.optimizer)
