"""Training loop, evaluation, metrics CSV and checkpoint/resume."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, dump_config, make_task, parse_config
from .errors import NumericError
from .model import Model, build_model
from .optim import AdamW, clip_grad_norm, lr_factor
from .tasks import IGNORE, TaskBatch, TaskStream
from .tensor import Tape

logger = logging.getLogger(__name__)


def batch_accuracy(logits: np.ndarray, batch: TaskBatch) -> tuple[int, int]:
    """``(correct, counted)``; LM positions labelled IGNORE are skipped."""
    pred = logits.argmax(axis=-1)
    labels = batch.labels
    if labels.ndim == 2:
        valid = labels != IGNORE
        return int((pred[valid] == labels[valid]).sum()), int(valid.sum())
    return int((pred == labels).sum()), int(labels.size)


def evaluate(model: Model, stream: TaskStream, n_batches: int) -> dict:
    """Loss and accuracy with every cache frozen; caches are left bit-identical."""
    was_frozen = [c.frozen for c in model.caches()]
    model.freeze()
    total_loss, correct, counted, loss_weight = 0.0, 0, 0, 0
    try:
        for _ in range(n_batches):
            batch = stream.next_batch()
            logits, loss = model.forward(batch, training=False)
            c, n = batch_accuracy(logits.data, batch)
            correct += c
            counted += n
            total_loss += float(loss.data) * n
            loss_weight += n
    finally:
        for cache, frozen in zip(model.caches(), was_frozen):
            cache.frozen = frozen
    mean_loss = total_loss / max(loss_weight, 1)
    out = {"loss": mean_loss, "accuracy": correct / max(counted, 1)}
    if model.cfg.task_head == "lm":
        out["ppl"] = math.exp(min(mean_loss, 700.0))
    return out


def mean_sigma_lambda(model: Model) -> list[Optional[float]]:
    return [float(np.mean(vals)) if vals else None for vals in model.lambdas()]


class MetricsWriter:
    """Append-only CSV: step, split, loss, accuracy, one sigma_lambda column per layer."""

    def __init__(self, path: Optional[Path], layers: int, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.columns = ["step", "split", "loss", "accuracy"] + [f"sigma_lambda_{i}" for i in range(layers)]
        self._pending: list[dict] = []
        if self.path is not None and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def add(self, row: dict) -> None:
        self._pending.append(row)

    def flush(self) -> None:
        if self.path is None or not self._pending:
            self._pending.clear()
            return
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            for row in self._pending:
                w.writerow([_fmt(row.get(c)) for c in self.columns])
        self._pending.clear()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Trainer:
    """Runs ``train_step`` until ``total_steps``, evaluating and checkpointing on the way.

    Each training forward pass updates every cache once; evaluation passes
    freeze them.
    """

    def __init__(self, model: Model, run: RunConfig, out_dir=None,
                 train_stream: Optional[TaskStream] = None,
                 eval_stream_factory: Optional[Callable[[], TaskStream]] = None):
        self.model = model
        self.run = run
        self.cfg = run.train
        self.out_dir = Path(out_dir) if out_dir is not None else None
        seed = self.cfg.seed
        self.stream = train_stream or make_task(run, [seed, 1])
        self.eval_stream_factory = eval_stream_factory or (lambda: make_task(run, [seed, 2]))
        self.opt = AdamW(model.named_parameters(), lr=self.cfg.lr, betas=(self.cfg.beta1, self.cfg.beta2),
                         weight_decay=self.cfg.weight_decay)
        self.step = 0
        self.history: list[dict] = []
        self._metrics: Optional[MetricsWriter] = None

    # -- metrics -----------------------------------------------------------
    def _row(self, split: str, loss: float, acc: float) -> dict:
        row = {"step": self.step, "split": split, "loss": float(loss), "accuracy": float(acc)}
        for i, v in enumerate(mean_sigma_lambda(self.model)):
            row[f"sigma_lambda_{i}"] = v
        self.history.append(row)
        if self._metrics is not None:
            self._metrics.add(row)
        return row

    def _diagnostics(self, loss: float) -> dict:
        diag = {"step": self.step, "loss": loss,
                "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in self.model.named_parameters()}}
        gates = []
        for i, block in enumerate(self.model.blocks):
            if block.attn.cached:
                c = block.attn.cache.C
                gates.append({"layer": i, "cache_mean": float(c.mean()), "cache_std": float(c.std()),
                              "lambda": block.attn.lam.data.tolist()})
        diag["gates"] = gates
        return diag

    # -- training ----------------------------------------------------------
    def train_step(self, batch: TaskBatch) -> tuple[float, float]:
        with Tape() as tape:
            logits, loss = self.model.forward(batch, training=True)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {self.step + 1}", self._diagnostics(value))
        tape.backward(loss)
        clip_grad_norm(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step(self.cfg.lr * lr_factor(self.step + 1, self.cfg.warmup_steps))
        self.opt.zero_grad()
        self.step += 1
        c, n = batch_accuracy(logits.data, batch)
        return value, c / max(n, 1)

    def evaluate(self) -> dict:
        return evaluate(self.model, self.eval_stream_factory(), self.cfg.eval_batches)

    def fit(self, until: Optional[int] = None) -> list[dict]:
        """Train up to step ``until`` (default ``total_steps``); returns all metric rows so far."""
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        if self.out_dir is not None and self._metrics is None:
            self._metrics = MetricsWriter(self.out_dir / "metrics.csv", self.model.cfg.layers,
                                          append=self.step > 0)
        while self.step < until:
            loss, acc = self.train_step(self.stream.next_batch())
            self._row("train", loss, acc)
            if self.step % self.cfg.eval_interval == 0 or self.step == self.cfg.total_steps:
                ev = self.evaluate()
                self._row("eval", ev["loss"], ev["accuracy"])
                logger.info("step %d train_loss %.4f eval_loss %.4f eval_acc %.4f",
                            self.step, loss, ev["loss"], ev["accuracy"])
                if self._metrics is not None:
                    self._metrics.flush()
                if self.out_dir is not None:
                    self.save(self.out_dir / "checkpoints" / f"step_{self.step:06d}.ckpt")
        if self._metrics is not None:
            self._metrics.flush()
        if self.out_dir is not None and self.step == self.cfg.total_steps:
            self.save(self.out_dir / "final.ckpt")
            write_lambda_csv(self.model, self.out_dir / "lambda.csv")
        return self.history

    # -- persistence -------------------------------------------------------
    def checkpoint(self) -> ckpt_io.Checkpoint:
        rng = {"data": self.stream.get_state(), "dropout": self.model._dropout_rng.bit_generator.state}
        return ckpt_io.model_checkpoint(self.model, dump_config(self.run), self.step, self.opt, rng)

    def save(self, path) -> Path:
        return ckpt_io.save(self.checkpoint(), path)

    @classmethod
    def resume(cls, path, out_dir=None) -> "Trainer":
        ck = ckpt_io.load(path)
        run = parse_config(ck.config_text, str(path))
        model = build_model(run.model, run.train.seed, np.dtype(run.dtype))
        trainer = cls(model, run, out_dir)
        ckpt_io.restore_into(model, ck, trainer.opt)
        trainer.step = ck.step
        if "data" in ck.rng:
            trainer.stream.set_state(ck.rng["data"])
        if "dropout" in ck.rng:
            model._dropout_rng.bit_generator.state = ck.rng["dropout"]
        return trainer


def load_model(path) -> tuple[Model, RunConfig, ckpt_io.Checkpoint]:
    """Rebuild a model (parameters and caches) from a checkpoint file."""
    ck = ckpt_io.load(path)
    run = parse_config(ck.config_text, str(path))
    model = build_model(run.model, run.train.seed, np.dtype(run.dtype))
    ckpt_io.restore_into(model, ck)
    return model, run, ck


def write_lambda_csv(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "sigma_lambda"])
        for layer, values in enumerate(model.lambdas()):
            for head, v in enumerate(values):
                w.writerow([layer, head, repr(float(v))])
    return path


def train(model: Model, run: RunConfig, out_dir=None, train_stream=None, eval_stream_factory=None) -> Trainer:
    """Train ``model`` for ``run.train.total_steps``; the returned trainer holds history and state."""
    trainer = Trainer(model, run, out_dir, train_stream, eval_stream_factory)
    trainer.fit()
    return trainer
