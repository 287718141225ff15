"""Synthetic task streams: copy (LM), ListOps and cross-sample prototypes.

Each stream owns a ``numpy.random.Generator``; ``get_state``/``set_state``
expose it so a resumed run draws exactly the same batches.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

IGNORE = -1


@dataclass
class TaskBatch:
    tokens: np.ndarray
    labels: np.ndarray
    lengths: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b, t = self.tokens.shape
        if self.lengths is None:
            self.lengths = np.full(b, t, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.lengths.shape != (b,) or np.any(self.lengths > t) or np.any(self.lengths < 1):
            raise DataError(f"lengths must be [B] with 1 <= length <= T={t}")
        if self.labels.shape not in ((b,), (b, t)):
            raise DataError(f"labels must be [B] or [B, T], got {self.labels.shape}")

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]


class TaskStream:
    vocab: int
    task_head: str
    num_classes: int = 0

    def __init__(self, seed: int, batch_size: int):
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> TaskBatch:
        return self.next_batch()

    def next_batch(self) -> TaskBatch:
        raise NotImplementedError

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


# ---------------------------------------------------------------------------
# copy task


class CopyTask(TaskStream):
    """``[s_1..s_h, s_1..s_h]``; next-token labels only where the copy is predictable.

    Token 0 is unused so symbols are ``1..vocab-1``.
    """

    task_head = "lm"

    def __init__(self, seed: int, batch_size: int, seq_len: int, vocab: int):
        if vocab < 3:
            raise ConfigError(f"copy task needs vocab >= 3, got {vocab}")
        if seq_len < 2 or seq_len % 2:
            raise ConfigError(f"copy task needs an even seq_len >= 2, got {seq_len}")
        super().__init__(seed, batch_size)
        self.seq_len = seq_len
        self.vocab = vocab

    def next_batch(self) -> TaskBatch:
        h = self.seq_len // 2
        first = self.rng.integers(1, self.vocab, size=(self.batch_size, h))
        tokens = np.concatenate([first, first], axis=1)
        labels = np.full_like(tokens, IGNORE)
        # position i predicts token i+1; the copy starts at index h
        labels[:, h - 1:-1] = tokens[:, h:]
        return TaskBatch(tokens, labels)


def gen_copy_task(seed: int, batch_size: int, seq_len: int, vocab: int) -> CopyTask:
    return CopyTask(seed, batch_size, seq_len, vocab)


# ---------------------------------------------------------------------------
# ListOps

OPS = ("MIN", "MAX", "MED", "SM")
PAD = 0
DIGIT0 = 1  # digit d -> token DIGIT0 + d
OP_TOKEN = {op: 11 + i for i, op in enumerate(OPS)}
CLOSE = 15
LISTOPS_VOCAB = 16
_TOKEN_OP = {v: k for k, v in OP_TOKEN.items()}


def apply_op(op: str, args: list[int]) -> int:
    if op == "MIN":
        return min(args)
    if op == "MAX":
        return max(args)
    if op == "MED":
        return int(statistics.median(args))
    if op == "SM":
        return sum(args) % 10
    raise DataError(f"unknown ListOps operator {op!r}")


def tokenize_listops(text: str) -> list[int]:
    """``"[MAX 2 9 1]"`` -> token ids."""
    out = []
    for piece in text.replace("]", " ] ").split():
        if piece == "]":
            out.append(CLOSE)
        elif piece.startswith("["):
            op = piece[1:]
            if op not in OP_TOKEN:
                raise DataError(f"unknown ListOps operator {op!r}")
            out.append(OP_TOKEN[op])
        elif piece.isdigit() and len(piece) == 1:
            out.append(DIGIT0 + int(piece))
        else:
            raise DataError(f"bad ListOps token {piece!r}")
    return out


def detokenize_listops(tokens) -> str:
    parts = []
    for tok in tokens:
        tok = int(tok)
        if tok == PAD:
            break
        if tok == CLOSE:
            parts.append("]")
        elif tok in _TOKEN_OP:
            parts.append("[" + _TOKEN_OP[tok])
        else:
            parts.append(str(tok - DIGIT0))
    return " ".join(parts).replace(" ]", "]")


def evaluate_listops(tokens) -> int:
    """Stack interpreter over token ids; independent of the generator's tree."""
    stack: list[list] = []
    result = None
    for tok in tokens:
        tok = int(tok)
        if tok == PAD:
            break
        if tok in _TOKEN_OP:
            stack.append([_TOKEN_OP[tok]])
        elif tok == CLOSE:
            if not stack or len(stack[-1]) < 2:
                raise DataError("unbalanced or empty ListOps expression")
            op, *args = stack.pop()
            value = apply_op(op, args)
            if stack:
                stack[-1].append(value)
            else:
                result = value
        elif DIGIT0 <= tok < DIGIT0 + 10:
            if not stack:
                return tok - DIGIT0
            stack[-1].append(tok - DIGIT0)
        else:
            raise DataError(f"token {tok} is not a ListOps token")
    if stack or result is None:
        raise DataError("unterminated ListOps expression")
    return result


class ListOpsTask(TaskStream):
    """Nested MIN/MAX/MED/SM expressions, 10-way classification of the value."""

    task_head = "classification"
    num_classes = 10
    vocab = LISTOPS_VOCAB

    def __init__(self, seed: int, batch_size: int, max_len: int = 64, max_depth: int = 4,
                 max_args: int = 5, leaf_prob: float = 0.6):
        if max_len < 8:
            raise ConfigError(f"ListOps needs max_len >= 8, got {max_len}")
        super().__init__(seed, batch_size)
        self.max_len = max_len
        self.max_depth = max_depth
        self.max_args = max_args
        self.leaf_prob = leaf_prob

    def _tree(self, depth: int):
        if depth > 1 and (depth >= self.max_depth or self.rng.random() < self.leaf_prob):
            return int(self.rng.integers(0, 10))
        op = OPS[int(self.rng.integers(0, len(OPS)))]
        n = int(self.rng.integers(2, self.max_args + 1))
        return (op, [self._tree(depth + 1) for _ in range(n)])

    @staticmethod
    def tree_value(tree) -> int:
        if isinstance(tree, int):
            return tree
        op, args = tree
        return apply_op(op, [ListOpsTask.tree_value(a) for a in args])

    @staticmethod
    def tree_tokens(tree) -> list[int]:
        if isinstance(tree, int):
            return [DIGIT0 + tree]
        op, args = tree
        out = [OP_TOKEN[op]]
        for a in args:
            out.extend(ListOpsTask.tree_tokens(a))
        out.append(CLOSE)
        return out

    def sample(self):
        """One ``(tree, tokens, label)`` that fits in ``max_len``."""
        while True:
            tree = self._tree(1)
            toks = self.tree_tokens(tree)
            if len(toks) <= self.max_len:
                return tree, toks, self.tree_value(tree)

    def next_batch(self) -> TaskBatch:
        tokens = np.full((self.batch_size, self.max_len), PAD, dtype=np.int64)
        labels = np.empty(self.batch_size, dtype=np.int64)
        lengths = np.empty(self.batch_size, dtype=np.int64)
        for i in range(self.batch_size):
            _, toks, label = self.sample()
            tokens[i, :len(toks)] = toks
            labels[i] = label
            lengths[i] = len(toks)
        return TaskBatch(tokens, labels, lengths)


def gen_listops(seed: int, batch_size: int, max_len: int = 64, max_depth: int = 4, **kw) -> ListOpsTask:
    return ListOpsTask(seed, batch_size, max_len, max_depth, **kw)


# ---------------------------------------------------------------------------
# cross-sample prototypes


def make_motifs(motif_seed: int, num_classes: int, seq_len: int, vocab: int) -> np.ndarray:
    rng = np.random.default_rng(motif_seed)
    return rng.integers(1, vocab, size=(num_classes, seq_len))


class PrototypeTask(TaskStream):
    """Each class owns a fixed token motif; samples are motifs with per-token noise.

    Every position is independently replaced, with probability ``noise``, by a
    uniform symbol from ``1..vocab-1``. Evidence for a class is therefore spread
    across many samples sharing the motif.
    """

    task_head = "classification"

    def __init__(self, seed: int, batch_size: int, seq_len: int, num_classes: int, vocab: int = 16,
                 noise: float = 0.5, motif_seed: int = 0, motifs: Optional[np.ndarray] = None):
        if num_classes < 2:
            raise ConfigError(f"prototype task needs num_classes >= 2, got {num_classes}")
        if not 0.0 <= noise <= 1.0:
            raise ConfigError(f"noise must be in [0, 1], got {noise}")
        super().__init__(seed, batch_size)
        self.seq_len = seq_len
        self.num_classes = num_classes
        self.vocab = vocab
        self.noise = noise
        self.motifs = make_motifs(motif_seed, num_classes, seq_len, vocab) if motifs is None else np.asarray(motifs)

    def next_batch(self) -> TaskBatch:
        labels = self.rng.integers(0, self.num_classes, size=self.batch_size)
        tokens = self.motifs[labels].copy()
        flip = self.rng.random(tokens.shape) < self.noise
        tokens[flip] = self.rng.integers(1, self.vocab, size=int(flip.sum()))
        return TaskBatch(tokens, labels)


def gen_prototype_task(seed: int, batch_size: int, seq_len: int, num_classes: int, **kw) -> PrototypeTask:
    return PrototypeTask(seed, batch_size, seq_len, num_classes, **kw)


def motif_match_classify(tokens: np.ndarray, motifs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Most-matching motif per row, ties broken uniformly (Bayes rule for uniform noise)."""
    matches = (tokens[:, None, :] == motifs[None, :, :]).sum(axis=-1)
    best = matches == matches.max(axis=1, keepdims=True)
    jitter = rng.random(best.shape) * best
    return np.argmax(jitter, axis=1)


def bayes_ceiling(task: PrototypeTask, samples: int = 20000, seed: int = 12345) -> float:
    """Monte-Carlo accuracy of the motif-matching Bayes classifier on fresh draws."""
    probe = PrototypeTask(seed, samples, task.seq_len, task.num_classes, task.vocab, task.noise,
                          motifs=task.motifs)
    batch = probe.next_batch()
    pred = motif_match_classify(batch.tokens, task.motifs, np.random.default_rng(seed + 1))
    return float((pred == batch.labels).mean())


TASKS = ("copy", "listops", "prototype")
