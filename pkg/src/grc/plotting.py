"""SVG curves from metrics.csv and a per-layer sigma(lambda) scatter.

Output is byte-stable across runs: fixed SVG hash salt, no date metadata,
text rendered as paths.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import FileFormatError  # noqa: E402

BASE_COLUMNS = ["step", "split", "loss", "accuracy"]
_RC = {"svg.hashsalt": "grc", "svg.fonttype": "path", "path.simplify": False}


def read_metrics(path) -> tuple[list[str], list[dict]]:
    """Parse metrics.csv strictly; errors carry the offending line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise FileFormatError(f"{path}: line 1: missing header")
    header = rows[0]
    if header[:4] != BASE_COLUMNS:
        raise FileFormatError(f"{path}: line 1: header must start with {','.join(BASE_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise FileFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        rec: dict = {"split": row[1]}
        try:
            rec["step"] = int(row[0])
            rec["loss"] = float(row[2])
            rec["accuracy"] = float(row[3])
            for name, raw in zip(header[4:], row[4:]):
                rec[name] = float(raw) if raw != "" else None
        except ValueError as exc:
            raise FileFormatError(f"{path}: line {lineno}: {exc}") from None
        out.append(rec)
    return header, out


def read_lambda_csv(path) -> list[tuple[int, int, float]]:
    path = Path(path)
    rows = list(csv.reader(path.read_text().splitlines()))
    if not rows or rows[0] != ["layer", "head", "sigma_lambda"]:
        raise FileFormatError(f"{path}: line 1: header must be layer,head,sigma_lambda")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        try:
            out.append((int(row[0]), int(row[1]), float(row[2])))
        except (ValueError, IndexError):
            raise FileFormatError(f"{path}: line {lineno}: malformed row {row!r}") from None
    return out


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _curve(rows: list[dict], key: str, out: Path, ylabel: str) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for split in ("train", "eval"):
            pts = [(r["step"], r[key]) for r in rows if r["split"] == split]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, label=split, marker="o" if split == "eval" else None, markersize=3)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if rows:
            ax.legend()
        return _save(fig, out)


def _lambda_scatter(points: list[tuple[int, int, float]], out: Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        heads = sorted({h for _, h, _ in points})
        for h in heads:
            xs = [layer for layer, hh, _ in points if hh == h]
            ys = [v for _, hh, v in points if hh == h]
            ax.scatter(xs, ys, s=18, label=f"head {h}" if h >= 0 else "layer mean")
        ax.axhline(0.5, color="grey", linestyle="--", linewidth=0.8)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("layer")
        ax.set_ylabel("sigmoid(lambda)")
        if points:
            ax.legend(fontsize=7)
        return _save(fig, out)


def plot_metrics(metrics_path, out_dir=None, lambda_path: Optional[str] = None) -> list[Path]:
    """Write loss.svg, accuracy.svg and lambda.svg; returns their paths."""
    metrics_path = Path(metrics_path)
    out_dir = Path(out_dir) if out_dir is not None else metrics_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = read_metrics(metrics_path)
    paths = [_curve(rows, "loss", out_dir / "loss.svg", "loss"),
             _curve(rows, "accuracy", out_dir / "accuracy.svg", "accuracy")]
    if lambda_path is None and (metrics_path.parent / "lambda.csv").exists():
        lambda_path = metrics_path.parent / "lambda.csv"
    if lambda_path is not None:
        points = read_lambda_csv(lambda_path)
    else:
        last = rows[-1] if rows else {}
        points = [(i, -1, last[c]) for i, c in enumerate(header[4:]) if last.get(c) is not None]
    paths.append(_lambda_scatter(points, out_dir / "lambda.svg"))
    return paths
