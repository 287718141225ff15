"""Parameter containers built on :mod:`grc.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, embedding, layer_norm


class Module:
    """Base class that discovers parameters and sub-modules by attribute walk.

    Attribute insertion order fixes parameter order, which keeps checkpoints and
    optimizer state reproducible.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform(rng, (d_in, d_out), bound, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-5):
        self.weight = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = zeros((d,), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self._eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, dtype=np.float64, std: float = 0.02):
        self.weight = Tensor((rng.standard_normal((n, d)) * std).astype(dtype), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return embedding(self.weight, ids)
