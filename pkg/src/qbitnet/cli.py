"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 dataset missing/corrupt,
3 config or schedule grammar error, 4 model format mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as ds
from .config import (
    ConfigError,
    build_network,
    load_arch_file,
    load_experiment_config,
)
from .deploy import ModelFormatError, deploy, load_model
from .network import NumericFailure
from .schedule import (
    arch_param_counts,
    build_schedule,
    parse_schedule_string,
    size_report,
    validate_schedule,
)
from .training import train

EXIT_RUNTIME = 1
EXIT_DATASET = 2
EXIT_CONFIG = 3
EXIT_MODEL = 4


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    try:
        cfg = load_experiment_config(args.config)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, f"{args.config}: {err}")
    if args.seed is not None:
        cfg.train.seed = args.seed
    try:
        data_dir = ds.resolve_data_dir(args.data or cfg.dataset_dir)
        splits = ds.load_dataset(cfg.dataset_kind, data_dir,
                                 mean=cfg.mean, std=cfg.std, augment=cfg.augment)
    except ds.DatasetFormatError as err:
        return _fail(EXIT_DATASET, str(err))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.train.seed)
    train_set, val_set = ds.split_validation(splits["train"], cfg.val_fraction, rng)
    net = build_network(cfg)

    log_path = out_dir / "metrics.tsv"
    try:
        with open(log_path, "w") as log:
            result = train(net, cfg.train, train_set, val_set, log_stream=log,
                           progress=lambda m: print(m.line(), flush=True))
    except NumericFailure as err:
        return _fail(EXIT_RUNTIME, str(err))

    net.load_state(result.best_state)
    model = deploy(net, mean=cfg.mean, std=cfg.std)
    model_path = out_dir / "model.qbm"
    model.save(model_path)

    from .report import render_training_curves
    render_training_curves(result.metrics, out_dir / "training_curve.png",
                           title=f"best val {result.best_val_acc * 100:.2f}% "
                                 f"@ epoch {result.best_epoch}")

    test_acc = model.accuracy(splits["test"])
    print(f"best_val_epoch\t{result.best_epoch}")
    print(f"test_acc\t{test_acc * 100:.2f}")
    print(f"model\t{model_path}")
    print(f"log\t{log_path}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = load_model(args.model)
    except ModelFormatError as err:
        return _fail(EXIT_MODEL, f"{args.model}: {err}")
    try:
        data_dir = ds.resolve_data_dir(args.data)
        kind = ds.detect_kind(data_dir)
        splits = ds.load_dataset(kind, data_dir, mean=model.mean, std=model.std)
    except ds.DatasetFormatError as err:
        return _fail(EXIT_DATASET, str(err))
    split = splits[args.split]
    try:
        acc = model.accuracy(split)
    except ModelFormatError as err:
        return _fail(EXIT_MODEL, str(err))
    except ValueError as err:
        return _fail(EXIT_DATASET, str(err))
    print(f"samples\t{len(split)}")
    print(f"top1_acc\t{acc * 100:.2f}")
    return 0


def cmd_size_report(args) -> int:
    try:
        arch = load_arch_file(args.arch)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, str(err))
    try:
        values, fc_start = parse_schedule_string(args.schedule)
        sched = build_schedule(arch, values, args.ka, fc_start)
    except ValueError as err:
        return _fail(EXIT_CONFIG, f"schedule {args.schedule!r}: {err}")
    violations = validate_schedule(sched)
    rep = size_report(sched, arch_param_counts(arch), args.baseline)
    from .report import size_report_table
    sys.stdout.write(size_report_table(rep))
    for idx, message in violations:
        print(f"violation\t{idx}\t{message}")
    if args.plot:
        from .report import render_size_report
        render_size_report(rep, args.plot)
        print(f"figure\t{args.plot}")
    return 0


def cmd_pack(args) -> int:
    """Validate a model file and rewrite it (canonical re-serialization)."""
    try:
        model = load_model(args.model)
        model.save(args.out)
    except ModelFormatError as err:
        return _fail(EXIT_MODEL, f"{args.model}: {err}")
    print(f"packed\t{args.out}")
    print(f"quantized_payload_bytes\t{model.quantized_payload_bytes()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qbitnet",
        description="Mixed-precision quantized network engine: train with "
                    "progressively decreasing bitwidths, pack models to "
                    "low-bit payloads, and account for the savings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True, help="experiment config path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", default=None,
                   help="dataset directory (defaults to config or $QBIT_DATA_DIR)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a packed model")
    p.add_argument("--model", required=True, help="model file (.qbm)")
    p.add_argument("--data", default=None,
                   help="dataset directory (or $QBIT_DATA_DIR)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("size-report", help="schedule accounting table")
    p.add_argument("--arch", required=True,
                   help="architecture file or preset name "
                        "(vgg7, resnet20, alexnet, resnet18)")
    p.add_argument("--schedule", required=True,
                   help="schedule string, e.g. 8-4-2-1-1-1/1")
    p.add_argument("--baseline", type=int, required=True,
                   help="homogeneous baseline bitwidth")
    p.add_argument("--ka", type=int, default=2, help="activation bitwidth")
    p.add_argument("--plot", default=None, help="write a PNG chart here")
    p.set_defaults(func=cmd_size_report)

    p = sub.add_parser("pack", help="validate and re-serialize a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
