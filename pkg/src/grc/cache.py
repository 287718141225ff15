"""Gated recurrent cache: state, gating, recurrent update and freezing.

The cache ``C`` is a fixed ``[T_m, D_m]`` buffer. Each training forward pass
folds the current (channel-sliced, length-interpolated) tokens into it::

    g_u = sigmoid([x, C_prev] @ W_u + b_u)
    g_r = sigmoid([x, C_prev] @ W_r + b_r)
    C~  = [x, g_r * C_prev] @ W_c + b_c
    C   = mean_over_batch((1 - g_u) * C_prev + g_u * C~)

``C_prev`` enters each step as a constant, so gradients reach the gate weights
and the current tokens but not earlier steps. ``bptt_steps > 1`` re-runs the
last few updates on stored inputs to extend that window.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import CacheStateError, CheckpointError, ConfigError, DimensionError
from .nn import Module, uniform, zeros
from .tensor import Tensor


def cache_width(ratio: float, d_model: int) -> int:
    """Number of cached channels, ``round(ratio * d_model)`` with halves rounded up."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"caching ratio must be in (0, 1], got {ratio}")
    return int(math.floor(ratio * d_model + 0.5))


def slice_channels(x: Tensor, ratio: float) -> Tensor:
    """Contiguous channel prefix of width ``cache_width(ratio, D)``."""
    width = cache_width(ratio, x.shape[-1])
    if width < 1:
        raise ConfigError(f"caching ratio {ratio} leaves no channels for D={x.shape[-1]}")
    if width == x.shape[-1]:
        return x
    return T.slice_last(x, 0, width)


def interpolation_matrix(n_in: int, n_out: int, valid: Optional[int] = None, dtype=np.float64) -> np.ndarray:
    """``[n_out, n_in]`` piecewise-linear resampling matrix.

    Only the first ``valid`` input tokens are used (padding is ignored). Inputs
    sit at positions ``i / (valid - 1)`` and outputs at ``j / (n_out - 1)``; a
    single output samples the midpoint.
    """
    valid = n_in if valid is None else int(valid)
    if not 1 <= valid <= n_in:
        raise DimensionError(f"valid length {valid} outside [1, {n_in}]")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if valid == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(valid - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (valid - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), valid - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def token_interpolate(x: Tensor, t_m: int, lengths: Optional[np.ndarray] = None) -> Tensor:
    """Resample ``[B, T, D_m]`` tokens to ``[B, t_m, D_m]`` along the token axis."""
    if x.ndim != 3:
        raise DimensionError(f"token_interpolate expects [B, T, D_m], got {x.shape}")
    b, t, _ = x.shape
    if t < 1 or t_m < 1:
        raise DimensionError(f"token counts must be positive, got T={t}, T_m={t_m}")
    if lengths is None or np.all(np.asarray(lengths) == t):
        if t == t_m:
            return x
        m = interpolation_matrix(t, t_m, dtype=x.dtype)
        return T.matmul(Tensor(m), x)
    m = np.stack([interpolation_matrix(t, t_m, int(n), dtype=x.dtype) for n in lengths])
    return T.matmul(Tensor(m), x)


def compute_gates(x: Tensor, c_prev: Tensor, w_u: Tensor, w_r: Tensor,
                  b_u: Optional[Tensor] = None, b_r: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
    """Update and reset gates for ``x: [B, T_m, D_m]`` against ``c_prev: [T_m, D_m]``."""
    if x.shape[-2:] != c_prev.shape:
        raise DimensionError(f"gate inputs disagree: tokens {x.shape} vs cache {c_prev.shape}")
    joint = T.concat_channels(x, T.expand(c_prev, x.shape[:-2]))
    u = joint @ w_u
    r = joint @ w_r
    if b_u is not None:
        u = u + b_u
    if b_r is not None:
        r = r + b_r
    return T.sigmoid(u), T.sigmoid(r)


def gated_step(x: Tensor, c_prev: Tensor, w_u, w_r, w_c, b_u=None, b_r=None, b_c=None,
               batch_mean: bool = True) -> Tensor:
    """One recurrent update; returns ``[T_m, D_m]`` (or ``[B, T_m, D_m]`` without averaging)."""
    g_u, g_r = compute_gates(x, c_prev, w_u, w_r, b_u, b_r)
    cand = T.concat_channels(x, g_r * c_prev) @ w_c
    if b_c is not None:
        cand = cand + b_c
    c_new = (1.0 - g_u) * c_prev + g_u * cand
    return T.mean(c_new, axis=0) if batch_mean else c_new


class GrcCache(Module):
    """Persistent cache buffer plus its gate and candidate weights."""

    def __init__(self, t_m: int, d_m: int, ratio: float = 0.5, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, bptt_steps: int = 1):
        if t_m < 1 or d_m < 1:
            raise ConfigError(f"cache sizes must be positive, got T_m={t_m}, D_m={d_m}")
        if not 0.0 < ratio <= 1.0:
            raise ConfigError(f"caching ratio must be in (0, 1], got {ratio}")
        if bptt_steps < 1:
            raise ConfigError(f"bptt_steps must be >= 1, got {bptt_steps}")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(2 * d_m)
        self.t_m = t_m
        self.d_m = d_m
        self.ratio = float(ratio)
        self.w_u = uniform(rng, (2 * d_m, d_m), bound, dtype)
        self.w_r = uniform(rng, (2 * d_m, d_m), bound, dtype)
        self.w_c = uniform(rng, (2 * d_m, d_m), bound, dtype)
        self.b_u = zeros((d_m,), dtype)
        self.b_r = zeros((d_m,), dtype)
        self.b_c = zeros((d_m,), dtype)
        self.bptt_steps = int(bptt_steps)
        self.step = 0
        self.frozen = False
        self._c = np.zeros((t_m, d_m), dtype=dtype)
        self._history: deque = deque(maxlen=self.bptt_steps - 1 if self.bptt_steps > 1 else 0)

    @property
    def C(self) -> np.ndarray:
        return self._c

    @C.setter
    def C(self, value) -> None:
        value = np.asarray(value, dtype=self._c.dtype)
        if value.shape != (self.t_m, self.d_m):
            raise DimensionError(f"cache must be {(self.t_m, self.d_m)}, got {value.shape}")
        self._c = value.copy()
        self._history.clear()

    @property
    def dtype(self):
        return self._c.dtype

    def as_tensor(self) -> Tensor:
        """Read-only view of the current cache as a constant tensor."""
        return Tensor(self._c)

    def freeze(self) -> None:
        self.frozen = True

    def thaw(self) -> None:
        self.frozen = False

    def _weights(self):
        return self.w_u, self.w_r, self.w_c, self.b_u, self.b_r, self.b_c

    def update(self, x: Tensor) -> Tensor:
        """Fold interpolated tokens ``x: [B, T_m, D_m]`` into the cache.

        Returns the new cache as a tensor attached to the active tape, and
        stores its value as the buffer for the next step.
        """
        if self.frozen:
            raise CacheStateError("cache is frozen; thaw() before updating")
        if x.ndim != 3 or x.shape[1:] != (self.t_m, self.d_m):
            raise DimensionError(f"cache update expects [B, {self.t_m}, {self.d_m}], got {x.shape}")
        if self._history:
            c = Tensor(self._history[0][0])
            for _, x_old in self._history:
                c = gated_step(Tensor(x_old), c, *self._weights())
        else:
            c = Tensor(self._c)
        c = gated_step(x, c, *self._weights())
        if self._history.maxlen:
            self._history.append((self._c.copy(), x.data.copy()))
        self._c = c.data.copy()
        self.step += 1
        return c

    def state(self) -> dict:
        return {"C": self._c.copy(), "step": self.step, "frozen": self.frozen,
                "history": [(a.copy(), b.copy()) for a, b in self._history]}

    def load_state(self, state: dict) -> None:
        self.C = state["C"]
        self.step = int(state["step"])
        self.frozen = bool(state["frozen"])
        for item in state.get("history", []):
            self._history.append(item)


CACHE_MAGIC = b"GRCC"
CACHE_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
# magic, version, T_m, D_m, ratio, step, frozen, dtype code
_CACHE_HEADER = struct.Struct("<4sIIIdQBB")


def cache_to_bytes(cache: GrcCache) -> bytes:
    """Little-endian layout: header, then C, W_u, W_r, W_c, b_u, b_r, b_c row-major."""
    dt = np.dtype(cache.dtype).newbyteorder("<")
    head = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.t_m, cache.d_m, cache.ratio,
                              cache.step, int(cache.frozen), _DTYPE_CODES[dt])
    arrays = [cache.C, *(w.data for w in cache._weights())]
    return head + b"".join(np.ascontiguousarray(a, dtype=dt).tobytes() for a in arrays)


def cache_from_bytes(blob: bytes, cache: Optional[GrcCache] = None) -> GrcCache:
    """Inverse of :func:`cache_to_bytes`; fills ``cache`` in place when given."""
    if len(blob) < _CACHE_HEADER.size:
        raise CheckpointError("cache record truncated")
    magic, version, t_m, d_m, ratio, step, frozen, code = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise CheckpointError(f"bad cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise CheckpointError(f"unsupported cache version {version}")
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    shapes = [(t_m, d_m)] + [(2 * d_m, d_m)] * 3 + [(d_m,)] * 3
    need = _CACHE_HEADER.size + sum(int(np.prod(s)) for s in shapes) * dt.itemsize
    if len(blob) != need:
        raise CheckpointError(f"cache record has {len(blob)} bytes, expected {need}")
    if cache is None:
        cache = GrcCache(t_m, d_m, ratio, dtype=dt.newbyteorder("="))
    elif (cache.t_m, cache.d_m) != (t_m, d_m):
        raise CheckpointError(f"cache shape {(t_m, d_m)} does not match model cache {(cache.t_m, cache.d_m)}")
    offset = _CACHE_HEADER.size
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype=dt, count=n, offset=offset).reshape(shape).astype(cache.dtype))
        offset += n * dt.itemsize
    cache.C = arrays[0]
    for w, a in zip(cache._weights(), arrays[1:]):
        w.data = a.copy()
    cache.ratio = ratio
    cache.step = int(step)
    cache.frozen = bool(frozen)
    return cache


def init_cache(t_m: int, d_m: int, *, ratio: float = 0.5, seed: int = 0, dtype=np.float64) -> GrcCache:
    return GrcCache(t_m, d_m, ratio, np.random.default_rng(seed), dtype)
