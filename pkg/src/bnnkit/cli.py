"""Command-line interface.

One subcommand per workflow stage: train, compile, infer, eval, bench, dse,
gradcam.  Each command prints a single JSON summary object on stdout; logs
and progress go to stderr.  Exit codes: 0 success, 2 usage or validation
error, 3 I/O error, 4 malformed model/checkpoint file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import compiler, data, engine, gradcam, perfmodel, train
from .errors import ModelFormatError
from .netspec import builtin_spec
from .perfmodel import PerfModelError

log = logging.getLogger("bnnkit")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _load_dataset(args, *, default_seed: int) -> data.ArrayDataset:
    """Resolve the shared --data/--manifest/--synthetic source options."""
    sources = [args.data is not None, args.manifest is not None, args.synthetic is not None]
    if sum(sources) != 1:
        raise ValueError("exactly one of --data, --manifest, --synthetic is required")
    if args.synthetic is not None:
        return data.synth_quadrant_dataset(args.synthetic, seed=default_seed)
    if args.manifest is not None:
        manifest = data.load_manifest(args.manifest)
    else:
        manifest = data.build_manifest(args.data, split=args.split)
        if getattr(args, "balance", False):
            manifest = data.balance(manifest, seed=default_seed)
    return data.dataset_from_manifest(manifest, args.split)


def _add_dataset_args(p: argparse.ArgumentParser, split: str) -> None:
    p.add_argument("--data", help="root directory with one folder per class")
    p.add_argument("--manifest", help="manifest CSV pinning files/labels/split")
    p.add_argument(
        "--synthetic",
        type=int,
        metavar="N",
        help="use the synthetic quadrant dataset with N images per class",
    )
    p.add_argument("--split", default=split, choices=data.SPLITS)


def _cmd_train(args) -> dict:
    spec = builtin_spec(args.arch)
    dataset = _load_dataset(args, default_seed=args.seed)
    config = train.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        augment=args.augment,
    )
    model = train.init_model(spec, seed=args.seed)
    history = train.train_model(model, dataset, config)
    train.save_checkpoint(model, args.out)
    last = history[-1]
    return {
        "command": "train",
        "arch": spec.arch_name,
        "epochs": len(history),
        "samples": len(dataset),
        "final_loss": round(float(last["loss"]), 6),
        "final_train_accuracy": round(float(last["accuracy"]), 6),
        "checkpoint": args.out,
    }


def _cmd_compile(args) -> dict:
    model = train.load_checkpoint(args.checkpoint)
    compiled = compiler.compile_model(model)
    compiler.emit_model(compiled, args.out)
    return {
        "command": "compile",
        "arch": compiled.arch_name,
        "layers": len(compiled.layers),
        "bytes": os.path.getsize(args.out),
        "model": args.out,
    }


def _cmd_infer(args) -> dict:
    model = compiler.load_model(args.model)
    results = []
    for path in args.images:
        image = data.load_image(path)
        class_id, scores = engine.classify(model, image)
        results.append(
            {
                "path": path,
                "class_id": class_id,
                "class_name": data.CLASS_NAMES[class_id],
                "scores": [int(s) for s in scores],
            }
        )
    return {"command": "infer", "arch": model.arch_name, "predictions": results}


def _cmd_eval(args) -> dict:
    model = compiler.load_model(args.model)
    dataset = _load_dataset(args, default_seed=args.seed)
    pred, _ = engine.classify(model, dataset.images)
    matrix = data.confusion_matrix(dataset.labels, pred)
    metrics = data.metrics_from_confusion(matrix)
    return {
        "command": "eval",
        "arch": model.arch_name,
        "confusion": matrix.tolist(),
        **metrics,
    }


def _folding_from_args(spec, args) -> perfmodel.FoldingConfig:
    if (args.pe is None) != (args.simd is None):
        raise ValueError("--pe and --simd must be given together")
    if args.pe is None:
        return perfmodel.reference_folding(spec.arch_name)
    names = [l.name for l in spec.weighted_layers]
    pe = [int(v) for v in args.pe.split(",")]
    simd = [int(v) for v in args.simd.split(",")]
    if len(pe) != len(names) or len(simd) != len(names):
        raise ValueError(
            f"{spec.arch_name} has {len(names)} weighted layers; --pe and "
            f"--simd need that many comma-separated values"
        )
    return perfmodel.FoldingConfig(pe=dict(zip(names, pe)), simd=dict(zip(names, simd)))


def _cmd_bench(args) -> dict:
    spec = builtin_spec(args.arch)
    folding = _folding_from_args(spec, args)
    report = perfmodel.pipeline_report(
        spec, folding, clock_hz=int(args.clock_mhz * 1_000_000)
    )
    return {"command": "bench", **report.to_json()}


def _cmd_dse(args) -> dict:
    spec = builtin_spec(args.arch)
    folding = perfmodel.suggest_folding(spec, args.pe_budget, args.simd_budget)
    report = perfmodel.pipeline_report(
        spec, folding, clock_hz=int(args.clock_mhz * 1_000_000)
    )
    return {
        "command": "dse",
        "pe_budget": args.pe_budget,
        "simd_budget": args.simd_budget,
        "pe_used": folding.total_pe,
        "simd_used": folding.total_simd,
        **report.to_json(),
    }


def _cmd_gradcam(args) -> dict:
    model = train.load_checkpoint(args.checkpoint)
    images = np.stack([data.load_image(p) for p in args.images])
    class_ids = None
    if args.class_id is not None:
        class_ids = np.full(len(args.images), args.class_id, dtype=np.int64)
    manifest = gradcam.overlay_batch(
        model, images, args.out_dir, class_ids=class_ids, alpha=args.alpha
    )
    return {
        "command": "gradcam",
        "out_dir": args.out_dir,
        "count": len(manifest["items"]),
        "items": manifest["items"],
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnnkit",
        description="Train, compile, execute and analyze binary neural classifiers.",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="log more detail to stderr (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a latent-weight model")
    p.add_argument("--arch", default="n-cnv", help="cnv, n-cnv or u-cnv")
    _add_dataset_args(p, split="train")
    p.add_argument("--balance", action="store_true", help="downsample classes to parity")
    p.add_argument("--augment", action="store_true", help="randomized augmentation")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compile", help="fold a checkpoint into a deployable model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="compiled model output path")
    p.set_defaults(func=_cmd_compile)

    p = sub.add_parser("infer", help="classify images with a compiled model")
    p.add_argument("--model", required=True)
    p.add_argument("images", nargs="+", help="image files")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate a compiled model on a labeled set")
    p.add_argument("--model", required=True)
    _add_dataset_args(p, split="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="cycle/throughput/latency estimates")
    p.add_argument("--arch", default="n-cnv")
    p.add_argument("--pe", help="comma-separated PE lanes per weighted layer")
    p.add_argument("--simd", help="comma-separated SIMD lanes per weighted layer")
    p.add_argument("--clock-mhz", type=float, default=100.0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("dse", help="search a folding under lane budgets")
    p.add_argument("--arch", default="n-cnv")
    p.add_argument("--pe-budget", type=int, required=True)
    p.add_argument("--simd-budget", type=int, required=True)
    p.add_argument("--clock-mhz", type=float, default=100.0)
    p.set_defaults(func=_cmd_dse)

    p = sub.add_parser("gradcam", help="write class-activation overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--class-id", type=int, help="explain this class (default: prediction)")
    p.add_argument("--alpha", type=float, default=gradcam.OVERLAY_ALPHA)
    p.add_argument("images", nargs="+", help="image files")
    p.set_defaults(func=_cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    level = (
        os.environ.get("BNNKIT_LOG")
        or {0: "WARNING", 1: "INFO"}.get(args.verbose, "DEBUG")
    )
    logging.basicConfig(stream=sys.stderr, level=level.upper(), format="%(message)s")
    try:
        summary = args.func(args)
    except ModelFormatError as e:
        log.error("model format error: %s", e)
        return EXIT_FORMAT
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        log.error("i/o error: %s", e)
        return EXIT_IO
    except (ValueError, PerfModelError) as e:
        log.error("invalid request: %s", e)
        return EXIT_USAGE
    _emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
