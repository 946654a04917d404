#!/usr/bin/env python3
"""Full-scale masked-face training run (opt-in; hours of CPU time).

The bundled test suite trains only on the synthetic quadrant set because the
full run needs the MaskedFace-Net images and a few hundred epochs. This
script documents that complete recipe end to end: manifest the class
folders, balance them, train with augmentation, evaluate on the held-out
split, and compile the deployable model.

Expected directory layout (one folder per wearing-position class):

    <root>/train/correct/*.png      <root>/test/correct/*.png
    <root>/train/nose/*.png         <root>/test/nose/*.png
    <root>/train/nose_mouth/*.png   <root>/test/nose_mouth/*.png
    <root>/train/chin/*.png         <root>/test/chin/*.png

Images are resized to 32x32 on load. Example:

    python scripts/train_masked_faces.py --root ~/maskedface-net \
        --arch cnv --epochs 300 --out-dir runs/full
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from bnnkit import compiler, data, netspec, train


def parse_args(argv):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", required=True, help="dataset root (see docstring)")
    p.add_argument("--arch", default="cnv", help="cnv, n-cnv or u-cnv")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-balance", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out-dir", default="runs/masked-faces")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(args.root)

    train_manifest = data.build_manifest(root / "train", split="train")
    test_manifest = data.build_manifest(root / "test", split="test")
    if args.no_balance:
        balanced = train_manifest
    else:
        balanced = data.balance(train_manifest, seed=args.seed)
    data.save_manifest(balanced, out_dir / "train_manifest.csv")
    data.save_manifest(test_manifest, out_dir / "test_manifest.csv")
    train_set = data.dataset_from_manifest(balanced, "train")
    test_set = data.dataset_from_manifest(test_manifest, "test")
    print(f"train {len(train_set.labels)} images, test {len(test_set.labels)}")

    model = train.init_model(netspec.builtin_spec(args.arch), seed=args.seed)
    config = train.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        augment=not args.no_augment,
    )
    # Same loop as train.train_model, unrolled for live per-epoch progress.
    state = train.AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    start = time.monotonic()
    for epoch in range(config.epochs):
        stats = train.train_epoch(model, train_set, config, state, rng, epoch)
        print(
            f"epoch {epoch + 1:4d}/{args.epochs} loss {stats['loss']:.4f} "
            f"train acc {stats['accuracy']:.4f} "
            f"({time.monotonic() - start:.0f}s)",
            flush=True,
        )

    checkpoint = out_dir / "model.bnck"
    train.save_checkpoint(model, checkpoint)
    compiled = compiler.compile_model(model)
    compiler.emit_model(compiled, out_dir / "model.bcop")

    ids, _ = train.predict(model, test_set.images)
    matrix = data.confusion_matrix(test_set.labels, ids)
    report = data.metrics_from_confusion(matrix)
    report["confusion"] = matrix.tolist()
    with open(out_dir / "eval.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"test accuracy {report['accuracy']:.4f}")
    print(f"artifacts in {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
