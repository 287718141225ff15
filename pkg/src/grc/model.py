"""Pre-norm transformer encoder built from GRC-Attention blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import GrcAttentionLayer, PositionalEncoding, inspect_lambda
from .cache import GrcCache, cache_width
from .errors import ConfigError, DataError
from .nn import Embedding, LayerNorm, Linear, Module
from .tasks import TaskBatch
from .tensor import Tensor

TASK_HEADS = ("classification", "lm")


@dataclass
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    cache_len: int = 64
    cache_ratio: float = 0.5
    ffn_mult: int = 2
    vocab: int = 16
    max_len: int = 64
    task_head: str = "classification"
    num_classes: int = 10
    use_cache: bool = True
    dropout: float = 0.0
    bptt_steps: int = 1

    def validate(self) -> "ModelConfig":
        for name in ("layers", "d_model", "heads", "cache_len", "ffn_mult", "vocab", "max_len", "bptt_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model % heads == 0 violated: d_model={self.d_model}, heads={self.heads}")
        if self.use_cache:
            d_m = cache_width(self.cache_ratio, self.d_model)
            if d_m < 1 or d_m % self.heads:
                raise ConfigError(
                    f"round(cache_ratio*d_model) % heads == 0 violated: "
                    f"round({self.cache_ratio}*{self.d_model})={d_m}, heads={self.heads}")
        if self.task_head not in TASK_HEADS:
            raise ConfigError(f"task_head must be one of {TASK_HEADS}, got {self.task_head!r}")
        if self.task_head == "classification" and self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d = cfg.d_model
        self.ln1 = LayerNorm(d, dtype)
        self.attn = GrcAttentionLayer(d, cfg.heads, cfg.cache_len, cfg.cache_ratio, rng, dtype,
                                      cached=cfg.use_cache, bptt_steps=cfg.bptt_steps)
        self.ln2 = LayerNorm(d, dtype)
        self.ff1 = Linear(d, d * cfg.ffn_mult, rng, dtype)
        self.ff2 = Linear(d * cfg.ffn_mult, d, rng, dtype)
        self._dropout = cfg.dropout

    def __call__(self, x: Tensor, training: bool, lengths=None, causal: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.attn(self.ln1(x), training=training, lengths=lengths, causal=causal)
        x = x + T.dropout(h, self._dropout, rng, training)
        h = self.ff2(T.gelu(self.ff1(self.ln2(x))))
        return x + T.dropout(h, self._dropout, rng, training)


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.embed = Embedding(cfg.vocab, cfg.d_model, rng, dtype)
        self.pos = PositionalEncoding(cfg.max_len, cfg.d_model, rng, dtype)
        self.blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.d_model, dtype)
        n_out = cfg.num_classes if cfg.task_head == "classification" else cfg.vocab
        self.head = Linear(cfg.d_model, n_out, rng, dtype)
        self._dropout_rng = np.random.default_rng([seed, 1])

    @property
    def dtype(self):
        return self._dtype

    # -- cache management ------------------------------------------------
    def caches(self) -> list[GrcCache]:
        return [b.attn.cache for b in self.blocks if b.attn.cached]

    def freeze(self) -> None:
        for c in self.caches():
            c.freeze()

    def thaw(self) -> None:
        for c in self.caches():
            c.thaw()

    def cache_state(self) -> list[dict]:
        return [c.state() for c in self.caches()]

    def load_cache_state(self, states: list[dict]) -> None:
        for c, s in zip(self.caches(), states):
            c.load_state(s)

    def lambdas(self) -> list[list[float]]:
        return [inspect_lambda(b.attn) for b in self.blocks]

    # -- forward -----------------------------------------------------------
    def encode(self, tokens: np.ndarray, training: bool, lengths: Optional[np.ndarray] = None) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"tokens must be [B, T], got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            bad = tokens[(tokens < 0) | (tokens >= self.cfg.vocab)].reshape(-1)[0]
            raise DataError(f"token id {int(bad)} outside vocabulary [0, {self.cfg.vocab})")
        b, t = tokens.shape
        if t > self.cfg.max_len:
            raise DataError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        causal = self.cfg.task_head == "lm"
        x = self.embed(tokens) + self.pos(t)
        for block in self.blocks:
            x = block(x, training, lengths=lengths, causal=causal, rng=self._dropout_rng)
        return self.ln_f(x)

    def forward(self, batch: TaskBatch, training: bool = False) -> tuple[Tensor, Tensor]:
        """Returns ``(logits, loss)``; classification logits are ``[B, C]``, LM ``[B, T, V]``."""
        h = self.encode(batch.tokens, training, batch.lengths)
        b, t, d = h.shape
        if self.cfg.task_head == "classification":
            lengths = batch.lengths if batch.lengths is not None else np.full(b, t)
            pool = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]) / np.asarray(lengths)[:, None]
            pooled = (Tensor(pool[:, None, :].astype(self._dtype)) @ h).reshape(b, d)
            logits = self.head(pooled)
            loss = T.cross_entropy(logits, batch.labels)
        else:
            logits = self.head(h)
            loss = T.cross_entropy(logits.reshape(b * t, logits.shape[-1]), np.asarray(batch.labels).reshape(-1))
        return logits, loss

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg, seed, dtype)


def copy_shared_weights(src: Model, dst: Model) -> None:
    """Copy every parameter ``dst`` has by name from ``src`` (e.g. cached -> baseline)."""
    params = dict(src.named_parameters())
    for name, p in dst.named_parameters():
        p.data = params[name].data.astype(p.dtype, copy=True)
