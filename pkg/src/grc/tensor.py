"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its result with numpy and, when a :class:`Tape`
is active and at least one input requires a gradient, appends a record holding
the adjoint rule. ``Tape.backward`` walks the records in exact reverse order.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a suffix of the other (extra *leading* batch axes).
Size-1 axis stretching is not supported.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # accumulated, caller zeroes between steps
"""

from __future__ import annotations

import math
import os
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

_debug = os.environ.get("GRC_DEBUG", "") not in ("", "0")
_local = threading.local()


def set_debug(enabled: bool) -> None:
    """Toggle the finite-value check run after every op."""
    global _debug
    _debug = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out, parents, backward, name):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered log of executed ops for a single forward/backward pair.

    Used as a context manager. Tapes are thread-local; one tape must not be
    shared between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward: Callable, name: str) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape whose backward pass already ran")
        rec = _Record(out, tuple(parents), backward, name)
        out._record = rec
        self.records.append(rec)

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None, trace: Optional[list] = None) -> None:
        """Propagate adjoints from ``loss`` to every leaf that requires a gradient.

        ``trace``, if given, receives the op names in visit order.
        """
        if self.consumed:
            raise TapeError("backward called twice on the same tape; re-run the forward pass first")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward without an explicit grad needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        adj: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        for rec in reversed(self.records):
            g = adj.pop(id(rec.out), None)
            if g is None:
                continue
            if trace is not None:
                trace.append(rec.name)
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    key = id(p)
                    if key in adj:
                        adj[key] = adj[key] + pg
                    else:
                        adj[key] = pg
                else:
                    p._accumulate(pg)
        self.records = []


class Tensor:
    """A dense array plus an optional accumulated gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[_Record] = None
        self._tape: Optional[Tape] = None

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced under an active Tape")
        self._tape.backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def transpose_last(self):
        return transpose_last(self)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op '{name}'")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, parents, backward, name)
    return out


def _leading_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(f"{op}: shapes {a} and {b} are incompatible (only leading batch axes broadcast)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary_inputs(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    else:
        a = as_tensor(a, b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    _leading_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    _leading_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    _leading_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd >= 0
    z = np.exp(-np.abs(xd))
    y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward, "sigmoid")


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_K * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), backward, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _reduce_to(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc

    def backward(g):
        return (g.reshape(src),)

    return _make(y, (x,), backward, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), backward, "permute")


def transpose_last(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last needs >= 2 dims, got {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def expand(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Prepend broadcast batch axes ``lead`` to ``x``."""
    lead = tuple(int(s) for s in lead)
    shape = lead + x.shape
    nlead = len(lead)

    def backward(g):
        return (g.sum(axis=tuple(range(nlead))) if nlead else g,)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), backward, "expand")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; all other axes must agree."""
    a, b = _binary_inputs(a, b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_channels: leading dims differ, {a.shape} vs {b.shape}")
    da = a.shape[-1]

    def backward(g):
        return g[..., :da], g[..., da:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), backward, "concat")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not 0 <= start <= stop <= width:
        raise DimensionError(f"slice [{start}:{stop}] out of range for last dim {width}")

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _make(x.data[..., start:stop].copy(), (x,), backward, "slice")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    src = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    src = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src) / n,)

    return _make(np.asarray(x.data.mean(axis=axes)), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# fused neural-net ops


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must be ({d},), got {gamma.shape} and {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, (x, gamma, beta), backward, "layer_norm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding id out of range [0, {vocab})")

    def backward(g):
        gw = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over rows of ``logits`` whose target is not ``ignore_index``."""
    targets = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy expects logits [N,C] and N targets, got {logits.shape}, {targets.shape}")
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise DimensionError("cross_entropy: every target is ignored")
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, targets[rows]].sum() / count

    def backward(g):
        p = np.exp(logp)
        p[rows, targets[rows]] -= 1.0
        p[~valid] = 0.0
        return (p * (g / count),)

    return _make(np.asarray(loss, dtype=ld.dtype), (logits,), backward, "cross_entropy")
