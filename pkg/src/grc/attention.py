"""Self-attention, cached attention over a :class:`GrcCache`, and their per-head mix."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .cache import GrcCache, cache_width, slice_channels, token_interpolate
from .errors import ConfigError, DimensionError
from .nn import Embedding, Linear, Module
from .tensor import Tensor

NEG_INF = -1e9


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., T, W]`` -> ``[..., H, T, W/H]``."""
    *lead, t, w = x.shape
    if w % heads:
        raise DimensionError(f"width {w} not divisible by {heads} heads")
    x = x.reshape(*lead, t, heads, w // heads)
    n = len(lead)
    axes = list(range(n)) + [n + 1, n, n + 2]
    return x.permute(*axes)


def merge_heads(x: Tensor) -> Tensor:
    """``[B, H, T, w]`` -> ``[B, T, H*w]``."""
    b, h, t, w = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, t, h * w)


def dot_product_attention(q: Tensor, k: Tensor, v: Tensor, scale: float,
                          mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """Dense softmax attention. Returns ``(output, weights)``."""
    scores = (q @ k.transpose_last()) * scale
    if mask is not None:
        scores = scores + Tensor(mask.astype(scores.dtype, copy=False))
    weights = T.softmax_lastdim(scores)
    return weights @ v, weights


def attention_mask(batch: int, heads: int, t: int, lengths: Optional[np.ndarray], causal: bool) -> Optional[np.ndarray]:
    """Additive mask hiding padded keys and, if ``causal``, future keys."""
    mask = None
    if causal:
        mask = np.triu(np.full((t, t), NEG_INF), k=1)
    if lengths is not None and np.any(np.asarray(lengths) < t):
        pad = (np.arange(t)[None, :] >= np.asarray(lengths)[:, None]) * NEG_INF
        full = np.broadcast_to(pad[:, None, None, :], (batch, heads, t, t))
        mask = full + (mask if mask is not None else 0.0)
    return mask


class PositionalEncoding(Embedding):
    """Learned absolute position table ``[T_max, D]``."""

    def __init__(self, max_len: int, d: int, rng, dtype=np.float64):
        super().__init__(max_len, d, rng, dtype)
        self.max_len = max_len

    def __call__(self, t: int) -> Tensor:
        if t > self.max_len:
            raise DimensionError(f"sequence length {t} exceeds max_len {self.max_len}")
        return T.embedding(self.weight, np.arange(t))


class GrcAttentionLayer(Module):
    """Multi-head attention whose heads blend self-attention with cached attention.

    With ``cached=False`` the layer is plain multi-head self-attention and owns
    no cache, which gives the no-cache baseline.
    """

    def __init__(self, d_model: int, heads: int, cache_len: int, ratio: float = 0.5,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64, cached: bool = True,
                 bptt_steps: int = 1):
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} must be divisible by heads={heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.heads = heads
        self.cached = cached
        self.q = Linear(d_model, d_model, rng, dtype)
        # key biases only shift every score in a row equally, so they are omitted
        self.k = Linear(d_model, d_model, rng, dtype, bias=False)
        self.v = Linear(d_model, d_model, rng, dtype)
        self.out = Linear(d_model, d_model, rng, dtype)
        self._self_attend: Callable = dot_product_attention
        self._mem_attend: Callable = dot_product_attention
        if cached:
            d_m = cache_width(ratio, d_model)
            if d_m < 1 or d_m % heads:
                raise ConfigError(f"cache width round({ratio}*{d_model})={d_m} must be a positive multiple of heads={heads}")
            self.d_m = d_m
            self.ratio = ratio
            self.lam = Tensor(np.zeros(heads, dtype=dtype), requires_grad=True)
            self.q_bar = Linear(d_m, d_m, rng, dtype)
            self.k_bar = Linear(d_m, d_m, rng, dtype, bias=False)
            # value projection widens to d_model so each head matches the self branch
            self.v_bar = Linear(d_m, d_model, rng, dtype)
            self.cache = GrcCache(cache_len, d_m, ratio, rng, dtype, bptt_steps)
            self._head_map = np.kron(np.eye(heads), np.ones((1, d_model // heads))).astype(dtype)

    def self_attention(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Per-head outputs ``[B, H, T, D/H]``."""
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(x), self.heads)
        v = split_heads(self.v(x), self.heads)
        out, _ = self._self_attend(q, k, v, 1.0 / math.sqrt(self.d_model / self.heads), mask)
        return out

    def cached_attention(self, x_bar: Tensor, c: Tensor) -> Tensor:
        """Tokens ``[B, T, D_m]`` query cache ``[T_m, D_m]``; returns ``[B, H, T, D/H]``."""
        if c.shape != (self.cache.t_m, self.d_m):
            raise DimensionError(f"cache must be {(self.cache.t_m, self.d_m)}, got {c.shape}")
        q = split_heads(self.q_bar(x_bar), self.heads)
        k = split_heads(self.k_bar(c), self.heads)
        v = split_heads(self.v_bar(c), self.heads)
        out, _ = self._mem_attend(q, k, v, 1.0 / math.sqrt(self.d_m / self.heads))
        return out

    def mix_ratio(self) -> Tensor:
        """sigmoid(lambda_h) repeated across each head's channels, shape ``[D]``."""
        s = T.sigmoid(self.lam).reshape(1, self.heads)
        return (s @ Tensor(self._head_map)).reshape(self.d_model)

    def __call__(self, x: Tensor, training: bool = False, lengths: Optional[np.ndarray] = None,
                 causal: bool = False) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise DimensionError(f"expected [B, T, {self.d_model}], got {x.shape}")
        b, t, _ = x.shape
        mask = attention_mask(b, self.heads, t, lengths, causal)
        o_self = merge_heads(self.self_attention(x, mask))
        if not self.cached:
            return self.out(o_self)
        x_bar = slice_channels(x, self.ratio)
        if training:
            c = self.cache.update(token_interpolate(x_bar, self.cache.t_m, lengths))
        else:
            c = self.cache.as_tensor()
        o_mem = merge_heads(self.cached_attention(x_bar, c))
        s = self.mix_ratio()
        return self.out(s * o_mem + (1.0 - s) * o_self)


def inspect_lambda(layer: GrcAttentionLayer) -> list[float]:
    """Current sigmoid(lambda_h) per head."""
    if not layer.cached:
        return []
    lam = layer.lam.data.astype(np.float64)
    return [float(v) for v in np.exp(-np.logaddexp(0.0, -lam))]
