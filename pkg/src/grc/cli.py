"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cache import cache_width
from .config import dump_config, load_config, make_task
from .errors import (CheckpointError, ConfigError, DataError, FileFormatError, NumericError,
                     OracleError)
from .model import build_model
from .oracle import gradcheck_model, oracle_agreement, tiny_instance
from .train import Trainer, evaluate, load_model, write_lambda_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("grc")


def _run_from_args(args):
    run = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        run.train.seed = args.seed
    if getattr(args, "out", None):
        run.out_dir = args.out
    return run.validate()


def _train_run(run, out_dir: Path) -> Trainer:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(dump_config(run))
    model = build_model(run.model, run.train.seed, np.dtype(run.dtype))
    trainer = Trainer(model, run, out_dir)
    trainer.fit()
    return trainer


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    if args.resume:
        trainer = Trainer.resume(args.resume, Path(args.out) if args.out else None)
        if trainer.out_dir is None:
            trainer.out_dir = Path(trainer.run.out_dir)
        trainer.fit()
    else:
        run = _run_from_args(args)
        trainer = _train_run(run, Path(run.out_dir))
    last = [r for r in trainer.history if r["split"] == "eval"]
    if last:
        print(f"step {trainer.step}: eval loss {last[-1]['loss']:.4f} accuracy {last[-1]['accuracy']:.4f}")
    print(f"wrote {trainer.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, run, _ = load_model(args.checkpoint)
    if args.task and args.task != run.task.task:
        run = replace(run, task=replace(run.task, task=args.task)).validate()
    seed = run.train.seed if args.seed is None else args.seed
    stream = make_task(run, [seed, 2])
    metrics = evaluate(model, stream, args.batches or run.train.eval_batches)
    metrics["task"] = run.task.task
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    return EXIT_OK


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--sizes expects six integers B,T,T_m,D,D_m,H, got {text!r}") from None
    if len(sizes) != 6:
        raise ConfigError(f"--sizes expects six integers B,T,T_m,D,D_m,H, got {text!r}")
    return sizes


def cmd_gradcheck(args) -> int:
    b, t, t_m, d, d_m, h = _parse_sizes(args.sizes)
    try:
        model, batch = tiny_instance(b, t, t_m, d, d_m, h, seed=args.seed)
    except OracleError as exc:
        raise ConfigError(str(exc)) from exc
    reports = gradcheck_model(model, batch, eps=args.eps, tol=args.tol)
    width = max(len(r.name) for r in reports)
    print(f"{'parameter':<{width}}  {'max_rel_err':>12}  {'max_abs_err':>12}  result")
    for r in reports:
        print(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.max_abs_err:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    agreement = oracle_agreement(args.oracle_instances, args.seed) if args.oracle_instances else 0.0
    if args.oracle_instances:
        print(f"oracle agreement over {args.oracle_instances} instances: max abs diff {agreement:.3e}")
    ok = all(r.passed for r in reports) and agreement < 1e-10
    report = {"sizes": dict(zip(("B", "T", "T_m", "D", "D_m", "H"), (b, t, t_m, d, d_m, h))),
              "eps": args.eps, "tolerance": args.tol, "parameters": [r.to_dict() for r in reports],
              "oracle_instances": args.oracle_instances, "oracle_max_abs_diff": agreement, "passed": ok}
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    print("ALL PASS" if ok else "FAILURES")
    return EXIT_OK if ok else EXIT_NUMERIC


def cache_stats(model) -> list[dict]:
    out = []
    for i, block in enumerate(model.blocks):
        if block.attn.cached:
            c = block.attn.cache
            out.append({"layer": i, "step": c.step, "frozen": c.frozen, "t_m": c.t_m, "d_m": c.d_m,
                        "mean": float(c.C.mean()), "std": float(c.C.std())})
    return out


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model, _, _ = load_model(args.checkpoint)
    elif args.config:
        run = _run_from_args(args)
        model = build_model(run.model, run.train.seed, np.dtype(run.dtype))
    else:
        raise ConfigError("inspect needs --checkpoint or --config")
    print("layer,head,sigma_lambda")
    for layer, values in enumerate(model.lambdas()):
        for head, v in enumerate(values):
            print(f"{layer},{head},{v:.6f}")
    print("layer,step,mean_sigma_lambda,cache_mean,cache_std")
    lambdas = model.lambdas()
    for s in cache_stats(model):
        print(f"{s['layer']},{s['step']},{np.mean(lambdas[s['layer']]):.6f},{s['mean']:.6e},{s['std']:.6e}")
    if args.out:
        out = Path(args.out)
        write_lambda_csv(model, out / "lambda.csv")
        with (out / "cache_stats.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["layer", "step", "frozen", "t_m", "d_m", "mean", "std"])
            w.writeheader()
            w.writerows(cache_stats(model))
    return EXIT_OK


SWEEP_FIELDS = ["ratio", "d_m", "status", "eval_loss", "eval_accuracy", "detail"]


def _sweep_job(run, label: str, out_dir: Path) -> dict:
    trainer = _train_run(run, out_dir)
    ev = [r for r in trainer.history if r["split"] == "eval"][-1]
    d_m = cache_width(run.model.cache_ratio, run.model.d_model) if run.model.use_cache else 0
    return {"ratio": label, "d_m": d_m, "status": "ok", "eval_loss": ev["loss"], "eval_accuracy": ev["accuracy"],
            "detail": ""}


def cmd_sweep_ratio(args) -> int:
    base = _run_from_args(args)
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"--ratios expects comma-separated floats, got {args.ratios!r}") from None
    out_root = Path(base.out_dir)
    rows: list[dict] = []
    jobs = []
    for r in ratios:
        label = f"{r:g}"
        try:
            d_m = cache_width(r, base.model.d_model)
            run = replace(base, model=replace(base.model, cache_ratio=r, use_cache=True)).validate()
        except ConfigError as exc:
            rows.append({"ratio": label, "d_m": "", "status": "rejected", "eval_loss": "", "eval_accuracy": "",
                         "detail": str(exc)})
            continue
        jobs.append((run, label, out_root / f"ratio_{label}"))
        logger.info("ratio %s -> D_m=%d", label, d_m)
    if args.baseline:
        run = replace(base, model=replace(base.model, use_cache=False)).validate()
        jobs.append((run, "baseline", out_root / "baseline"))
    workers = max(1, min(int(os.environ.get("GRC_NUM_THREADS", "1")), len(jobs) or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows.extend(pool.map(lambda job: _sweep_job(*job), jobs))
    order = {f"{r:g}": i for i, r in enumerate(ratios)}
    rows.sort(key=lambda row: order.get(row["ratio"], len(order)))
    out_root.mkdir(parents=True, exist_ok=True)
    with (out_root / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(",".join(str(row[k]) for k in SWEEP_FIELDS))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_metrics

    for path in plot_metrics(args.metrics, args.out, args.lambda_csv):
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grc", description="Gated recurrent cache transformer tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", help="continue from a checkpoint instead of --config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with frozen caches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["copy", "listops", "prototype"])
    p.add_argument("--batches", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference and oracle checks on a tiny model")
    p.add_argument("--sizes", default="1,2,2,4,2,2", help="B,T,T_m,D,D_m,H")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--oracle-instances", type=int, default=20)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print sigma(lambda) per head and cache statistics")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep-ratio", help="train one model per caching ratio")
    p.add_argument("--config", required=True)
    p.add_argument("--ratios", default="0.25,0.5,1.0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-baseline", dest="baseline", action="store_false")
    p.set_defaults(func=cmd_sweep_ratio)

    p = sub.add_parser("plot", help="write SVG curves from metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--lambda-csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not (args.config or args.resume):
        parser.error("train needs --config or --resume")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FileFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
