"""Flat ``key = value`` run configuration files.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines are
ignored; keys are unique. Booleans accept true/false/yes/no/1/0. Unknown keys,
duplicates and missing required keys are errors that name the line or key.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .tasks import LISTOPS_VOCAB, TASKS, CopyTask, ListOpsTask, PrototypeTask, TaskStream


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 8
    grad_clip: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        for name in ("total_steps", "batch_size", "eval_interval", "eval_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be >= 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps must be in [0, total_steps], got {self.warmup_steps}")
        return self


@dataclass
class TaskConfig:
    task: str = "copy"
    seq_len: int = 16
    max_depth: int = 4
    max_args: int = 5
    leaf_prob: float = 0.6
    noise: float = 0.5
    motif_seed: int = -1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    out_dir: str = "runs/default"
    dtype: str = "float32"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        t, m = self.task, self.model
        if t.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {t.task!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        expected_head = "lm" if t.task == "copy" else "classification"
        if m.task_head != expected_head:
            raise ConfigError(f"task {t.task!r} requires task_head={expected_head}, got {m.task_head}")
        if t.task == "listops":
            if m.vocab < LISTOPS_VOCAB or m.num_classes != 10:
                raise ConfigError(f"listops requires vocab >= {LISTOPS_VOCAB} and num_classes = 10")
            if t.seq_len > m.max_len:
                raise ConfigError(f"seq_len {t.seq_len} exceeds max_len {m.max_len}")
        elif t.seq_len > m.max_len:
            raise ConfigError(f"seq_len {t.seq_len} exceeds max_len {m.max_len}")
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "task": TaskConfig}
_TOP = {"out_dir": str, "dtype": str}
REQUIRED = ("task", "task_head", "layers", "d_model", "heads", "vocab", "max_len", "lr", "total_steps", "batch_size")


def _key_table() -> dict[str, tuple[Optional[str], type]]:
    table: dict[str, tuple[Optional[str], type]] = {}
    for section, cls in _SECTIONS.items():
        defaults = cls()
        for f in fields(cls):
            table[f.name] = (section, type(getattr(defaults, f.name)))
    for key, typ in _TOP.items():
        table[key] = (None, typ)
    return table


KEYS = _key_table()


def _coerce(raw: str, typ: type, key: str, lineno: int):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typ.__name__}, got {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        if raw == "":
            raise ConfigError(f"{source}: line {lineno}: empty value for {key!r}")
        values[key] = _coerce(raw, KEYS[key][1], key, lineno)
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(missing)}")
    return build_run_config(values)


def build_run_config(values: dict) -> RunConfig:
    run = RunConfig()
    for key, value in values.items():
        section, _ = KEYS[key]
        target = run if section is None else getattr(run, section)
        setattr(target, key, value)
    return run.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(run: RunConfig) -> str:
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"# {section}")
        obj = getattr(run, section)
        for f in fields(cls):
            value = getattr(obj, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
    lines.append("# run")
    lines.append(f"out_dir = {run.out_dir}")
    lines.append(f"dtype = {run.dtype}")
    return "\n".join(lines) + "\n"


def make_task(run: RunConfig, seed, batch_size: Optional[int] = None) -> TaskStream:
    """Build the task stream described by ``run`` drawing from ``seed``."""
    t, m = run.task, run.model
    bs = batch_size or run.train.batch_size
    if t.task == "copy":
        return CopyTask(seed, bs, t.seq_len, m.vocab)
    if t.task == "listops":
        return ListOpsTask(seed, bs, t.seq_len, t.max_depth, t.max_args, t.leaf_prob)
    motif_seed = t.motif_seed if t.motif_seed >= 0 else run.train.seed
    return PrototypeTask(seed, bs, t.seq_len, m.num_classes, m.vocab, t.noise, motif_seed)
