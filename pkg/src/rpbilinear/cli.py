"""Command-line entry point.

Exit codes: 0 success, 1 a check or metric failed (or training diverged),
2 usage or I/O error. Every command writes ``manifest.json`` into its output
directory, on success and on failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import DEFAULT_GRID, bench_grid, pin_single_cpu, summarize
from .dataio import (
    BrpfError,
    SynthConfig,
    gen_synthetic,
    make_folds,
    read_features,
    read_labels_text,
    write_features,
    write_labels_text,
)
from .kernel_verify import SUITES, SuiteUsageError, run_suite, write_reports
from .metrics import evaluate
from .segnet import HEADS, Model, NetConfig, TrainConfig, TrainingDivergedError, fit, load_checkpoint, predict, save_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or missing input files; maps to exit code 2."""


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.data = {
            "command": command,
            "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "timings": {},
            "outputs": [],
            "status": "running",
        }
        self._t = time.perf_counter()

    def phase(self, name: str) -> None:
        now = time.perf_counter()
        self.data["timings"][name] = round(now - self._t, 6)
        self._t = now

    def output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def write(self, out_dir: Path, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        if error:
            self.data["error"] = error
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------- commands

def cmd_verify_kernel(args, manifest: RunManifest) -> int:
    try:
        reports = run_suite(args.suite, args.seed, args.samples, args.rank)
    except SuiteUsageError as exc:
        raise UsageError(str(exc)) from exc
    manifest.phase("sampling")
    path = args.out / "reports.jsonl"
    write_reports(path, reports)
    manifest.output(path)
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {rep.test_name}: mean={rep.empirical_mean:.6g} target={rep.target:.6g} z={rep.z_score:.3g}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_bench(args, manifest: RunManifest) -> int:
    pinned = pin_single_cpu()
    rows = bench_grid(args.dims, args.grid, args.rank, args.reps, args.warmup, args.rounds, args.seed)
    manifest.phase("timing")
    path = args.out / "bench.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "D", "d", "median_ns", "flop_count"])
        writer.writeheader()
        writer.writerows(rows)
    summary = summarize(rows)
    summary["pinned_single_cpu"] = pinned
    _dump_json(args.out / "bench_summary.json", summary)
    manifest.output(path)
    manifest.output(args.out / "bench_summary.json")
    for d, fr, sp in zip(summary["d"], summary["flop_ratio"], summary["speedup"]):
        print(f"d={d}: flop ratio {fr:.2f}, wall-clock speedup {sp:.2f}")
    return EXIT_OK


def cmd_gen_data(args, manifest: RunManifest) -> int:
    cfg = SynthConfig(n_classes=args.classes, D=args.dims, T_range=(args.t_min, args.t_max), seed=args.seed,
                      stickiness=args.stickiness, noise_std=args.noise, separation=args.separation)
    try:
        seqs = gen_synthetic(cfg, args.n_sequences)
        folds = make_folds(seqs, args.folds)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        write_features(args.out / f"{s.id}.brpf", s)
        if args.export_labels:
            write_labels_text(args.out / f"{s.id}.labels.txt", s.labels)
    _dump_json(args.out / "folds.json", {
        "k": args.folds,
        "folds": [{"train": tr, "test": te} for tr, te in folds],
        "synth": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg).items()},
    })
    manifest.phase("generate")
    manifest.output(args.out / "folds.json")
    print(f"wrote {len(seqs)} sequences and {args.folds} folds to {args.out}")
    return EXIT_OK


def _load_split(data_dir: Path, fold: int):
    folds_path = data_dir / "folds.json"
    if not folds_path.is_file():
        raise UsageError(f"missing fold manifest: {folds_path}")
    folds = json.loads(folds_path.read_text())["folds"]
    if not 0 <= fold < len(folds):
        raise UsageError(f"fold {fold} out of range (have {len(folds)})")

    def load(ids):
        out = []
        for sid in ids:
            p = data_dir / f"{sid}.brpf"
            if not p.is_file():
                raise UsageError(f"missing sequence file: {p}")
            try:
                out.append(read_features(p))
            except BrpfError as exc:
                raise UsageError(str(exc)) from exc
        return out

    return load(folds[fold]["train"]), load(folds[fold]["test"])


def cmd_train(args, manifest: RunManifest) -> int:
    train, test = _load_split(args.data, args.fold)
    manifest.phase("load")
    n_classes = max(s.n_classes for s in train + test)
    net = NetConfig(D_in=train[0].D, n_classes=n_classes, hidden=args.hidden, layers=args.layers,
                    head=args.variant, rank=args.rank, rows=args.rows, head_kernel=args.head_kernel,
                    dropout=args.dropout)
    model = Model.init(net, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "train_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "val_acc"])
        writer.writeheader()

        def log(row):
            writer.writerow({k: repr(float(v)) if k != "epoch" else v for k, v in row.items()})
            fh.flush()
            print(f"epoch {row['epoch']}: loss {row['loss']:.4f} train {row['train_acc']:.2f} val {row['val_acc']:.2f}")

        try:
            fit(model, train, TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed), test, log)
        except TrainingDivergedError as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            manifest.output(log_path)
            return EXIT_FAIL
    manifest.phase("train")
    ckpt = args.out / "checkpoint.brpc"
    save_checkpoint(ckpt, model)
    manifest.output(log_path)
    manifest.output(ckpt)
    return EXIT_OK


def cmd_eval(args, manifest: RunManifest) -> int:
    if args.pred is not None or args.gt is not None:
        if args.pred is None or args.gt is None:
            raise UsageError("--pred and --gt must be given together")
        for p in (args.pred, args.gt):
            if not p.is_file():
                raise UsageError(f"missing label file: {p}")
        pairs = [(read_labels_text(args.pred), read_labels_text(args.gt))]
    else:
        if args.checkpoint is None or args.data is None:
            raise UsageError("eval needs --checkpoint and --data, or --pred and --gt")
        if not args.checkpoint.is_file():
            raise UsageError(f"missing checkpoint: {args.checkpoint}")
        try:
            model = load_checkpoint(args.checkpoint)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        _, test = _load_split(args.data, args.fold)
        pairs = [(predict(model, s.features), s.labels) for s in test]
    try:
        metrics = evaluate(pairs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest.phase("evaluate")
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "metrics.json"
    _dump_json(path, metrics)
    manifest.output(path)
    print(" ".join(f"{k}={v:.2f}" for k, v in metrics.items()))
    if args.min_acc is not None and metrics["acc"] < args.min_acc:
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpbilinear", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    def common(p, out_default="."):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")

    p = sub.add_parser("verify-kernel", help="Monte-Carlo checks of the kernel identities")
    common(p)
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.set_defaults(func=cmd_verify_kernel)

    p = sub.add_parser("bench", help="flop counts and wall-clock of pooling vs the Hadamard baseline")
    common(p)
    p.add_argument("--dims", type=int, default=64, help="input dimension D")
    p.add_argument("--grid", type=_int_list, default=list(DEFAULT_GRID), help="comma-separated output dims d")
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--rounds", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write a synthetic BRPF dataset with folds")
    common(p, "data")
    p.add_argument("--n-sequences", type=int, default=80)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--t-min", type=int, default=450)
    p.add_argument("--t-max", type=int, default=550)
    p.add_argument("--stickiness", type=float, default=0.98)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=SynthConfig.separation)
    p.add_argument("--export-labels", action="store_true", help="also write one-label-per-line text files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the single-stage network on one fold")
    common(p, "run")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--variant", choices=HEADS, default="rpgaussian")
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.0005)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--rows", type=int, default=None, help="M = N (default hidden/2)")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--head-kernel", type=int, default=25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="segmentation metrics for a checkpoint or two label files")
    common(p, "run")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--pred", type=Path, help="predicted labels, one per line")
    p.add_argument("--gt", type=Path, help="ground-truth labels, one per line")
    p.add_argument("--min-acc", type=float, default=None, help="exit 1 when accuracy falls below this")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(args.command, args)
    try:
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            print(f"error: cannot create output directory {args.out}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        code = args.func(args, manifest)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest.write(args.out, "usage_error", str(exc))
        return EXIT_USAGE
    except Exception as exc:
        manifest.write(args.out, "error", repr(exc))
        raise
    manifest.write(args.out, "ok" if code == EXIT_OK else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
