"""Command-line interface.

Exit codes: 0 on success, 1 for bad usage (argument errors), 2 for runtime
failures (unreadable files, malformed data, numeric faults, a failed gradient
check). The ``LFM_THREADS`` environment variable caps intra-op threading.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .core import ConfigError, DatasetError, LiftError, Sample, edges_to_adjacency
from .data import load_dataset, load_dataset_spec, make_dataset, save_dataset
from .evaluate import evaluate
from .model import (ATTN_MODES, ENCODINGS, PRECISIONS, KeypointLifter, ModelConfig,
                    lift_sample, load_checkpoint, save_checkpoint)
from .encoding import PHASE_DISTRIBUTIONS
from .plots import plot_history, plot_report, plot_shape
from .train import TrainHistory, fit, gradient_check, load_train_config


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this project reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _cmd_synth(args) -> int:
    spec = load_dataset_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    dataset = make_dataset(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples across {len(dataset.categories)} "
          f"categories to {args.out}")
    return 0


def _cmd_train(args) -> int:
    train_config = load_train_config(args.config)
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val)
    model_config = ModelConfig(
        n_max=max(train_set.n_max, val_set.n_max),
        dim=args.dim, heads=args.heads, layers=args.layers, ff_mult=args.ff_mult,
        attn_mode=args.attn_mode, encoding=args.encoding,
        rff_sigma=args.rff_sigma, rff_seed=args.rff_seed,
        phase_dist=args.phase_dist, precision=args.precision)
    model = KeypointLifter(model_config, seed=train_config.seed)
    history = fit(model, train_set, val_set, train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    history.write_csv(out / "history.csv")
    plot_history(history, out / "curves.svg")
    best = min(history.val_mpjpe) if history.val_mpjpe else float("nan")
    print(f"stopped after {len(history.epochs)} epochs ({history.stop_reason}); "
          f"best epoch {history.best_epoch} with val MPJPE {best:.6f}")
    print(f"checkpoint, history.csv, and curves.svg written to {out}")
    return 0


def _check_capacity(dataset, model) -> None:
    if dataset.n_max > model.config.n_max:
        raise ConfigError(
            f"dataset needs capacity for {dataset.n_max} joints but the checkpoint "
            f"was built for {model.config.n_max}")


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_capacity(dataset, model)
    report = evaluate(model, dataset)
    path = Path(args.report)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    path.with_suffix(".txt").write_text(report.to_text())
    plot_report(report, path.with_suffix(".svg"))
    sys.stdout.write(report.to_text())
    return 0


def _cmd_lift(args) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.input)
    _check_capacity(dataset, model)
    lines = [json.dumps({"n_max": dataset.n_max, "categories": dataset.categories})]
    for sample in dataset.samples:
        canon, result = lift_sample(model, sample)
        record = {
            "category": sample.category,
            "w2d": sample.w2d.tolist(),
            "s3d": sample.s3d.tolist() if sample.s3d is not None else None,
            "mask": [int(v) for v in sample.mask.tolist()],
            "edges": [[int(i), int(j)] for i, j in
                      torch.triu(sample.adjacency, diagonal=1).nonzero().tolist()],
            "s3d_canon": canon.tolist(),
            "s3d_pred": result.aligned.tolist() if result is not None else None,
            "rotation": result.rotation.tolist() if result is not None else None,
            "scale": float(result.scale.item()) if result is not None else None,
        }
        lines.append(json.dumps(record))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"lifted {len(dataset)} samples to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    if not dataset.samples:
        raise DatasetError("gradient check needs at least one sample")
    report = gradient_check(model, dataset.samples[0], eps=args.eps)
    for name in sorted(report.per_param):
        print(f"{name}: {report.per_param[name]:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck {status}: max rel err {report.max_rel_err:.3e} "
          f"(threshold {report.threshold:g}, worst {report.worst_param or 'n/a'}, "
          f"{report.checked} coordinates)")
    return 0 if report.passed else 2


def _read_jsonl(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc}", line=1) from exc
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append((ln, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc}", line=ln) from exc
    return header, records


def _cmd_plot(args) -> int:
    if (args.history is None) == (args.pred is None):
        args.parser.error("exactly one of --history or --pred is required")
    if args.history is not None:
        history = TrainHistory.read_csv(args.history)
        plot_history(history, args.out)
    else:
        _, records = _read_jsonl(args.pred)
        if not 0 <= args.index < len(records):
            raise DatasetError(
                f"record index {args.index} out of range ({len(records)} records)")
        ln, record = records[args.index]
        for key in ("w2d", "mask", "edges"):
            if key not in record:
                raise DatasetError(f"record is missing {key!r}", line=ln)
        pred = record.get("s3d_pred")
        if pred is None:
            pred = record.get("s3d_canon")
        if pred is None:
            raise DatasetError("record carries no prediction to plot", line=ln)
        n = len(record["w2d"])
        try:
            sample = Sample(w2d=record["w2d"], s3d=record.get("s3d"),
                            mask=record["mask"],
                            adjacency=edges_to_adjacency(record["edges"], n),
                            category=record.get("category", "sample"))
        except LiftError as exc:
            raise DatasetError(str(exc), line=ln) from exc
        plot_shape(sample, pred, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lift3d",
                     description="Lift 2D keypoints to 3D with a hybrid attention network.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="dataset spec (key = value lines)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p.set_defaults(func=_cmd_synth, parser=p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--val", required=True, help="validation JSONL")
    p.add_argument("--config", required=True, help="training config (key = value lines)")
    p.add_argument("--out", required=True, help="output directory for the checkpoint")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--ff-mult", type=int, default=4)
    p.add_argument("--attn-mode", choices=ATTN_MODES, default="hybrid")
    p.add_argument("--encoding", choices=ENCODINGS, default="tpe")
    p.add_argument("--rff-sigma", type=float, default=1.0)
    p.add_argument("--rff-seed", type=int, default=0)
    p.add_argument("--phase-dist", choices=PHASE_DISTRIBUTIONS, default="uniform")
    p.add_argument("--precision", choices=PRECISIONS, default="f64")
    p.set_defaults(func=_cmd_train, parser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--report", required=True,
                   help="report path (.txt and .svg siblings are written too)")
    p.set_defaults(func=_cmd_eval, parser=p)

    p = sub.add_parser("lift", help="predict 3D shapes for a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output JSONL with predictions")
    p.set_defaults(func=_cmd_lift, parser=p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset; the first sample is used")
    p.add_argument("--eps", type=float, default=1e-3)
    p.set_defaults(func=_cmd_gradcheck, parser=p)

    p = sub.add_parser("plot", help="render a history or prediction figure")
    p.add_argument("--history", help="history.csv from training")
    p.add_argument("--pred", help="predictions JSONL from the lift command")
    p.add_argument("--index", type=int, default=0, help="record index for --pred")
    p.add_argument("--out", required=True, help="figure path (svg)")
    p.set_defaults(func=_cmd_plot, parser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("LFM_THREADS")
    if threads:
        try:
            count = int(threads)
            if count < 1:
                raise ValueError(threads)
        except ValueError:
            print(f"error: LFM_THREADS must be a positive integer, got {threads!r}",
                  file=sys.stderr)
            return 2
        torch.set_num_threads(count)
    try:
        return int(args.func(args) or 0)
    except LiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
