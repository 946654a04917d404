"""Datasets, augmentation and evaluation metrics.

Images are uint8 RGB arrays of shape (32, 32, 3).  The four classes encode
how a face covering is worn: 0 fully correct, 1 nose exposed, 2 nose and
mouth exposed, 3 chin-only.  Directory-backed datasets keep one subfolder
per class name; a manifest CSV pins the exact file list, labels and split
so runs are reproducible.  A synthetic quadrant dataset is included for
self-contained training tests: class k places a high-contrast patch in
quadrant k of a noisy background, so correct classifiers must attend to
one quarter of the frame.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

CLASS_NAMES = ("correct", "nose", "nose_mouth", "chin")
IMAGE_SIZE = 32
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    class_id: int
    split: str


@dataclass(frozen=True)
class Manifest:
    """An ordered list of (path, class, split) records."""

    records: tuple[ManifestRecord, ...]
    skipped: int = 0

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if not 0 <= r.class_id < len(CLASS_NAMES):
                raise ValueError(f"{r.path}: class id {r.class_id} out of range")
            if r.split not in SPLITS:
                raise ValueError(f"{r.path}: unknown split {r.split!r}")
            key = (r.path, r.split)
            if key in seen:
                raise ValueError(f"duplicate manifest entry {r.path} in {r.split}")
            seen.add(key)

    def for_split(self, split: str) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def class_counts(self, split: str) -> np.ndarray:
        counts = np.zeros(len(CLASS_NAMES), dtype=np.int64)
        for r in self.for_split(split):
            counts[r.class_id] += 1
        return counts


def build_manifest(root, split: str = "train") -> Manifest:
    """Scan a class-per-subfolder tree into a manifest.

    Files are listed lexicographically for stable ordering.  Subdirectories
    that are not class names raise; unreadable or non-image files are skipped
    with a logged warning and counted in `manifest.skipped`.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    entries = sorted(os.scandir(root), key=lambda e: e.name)
    records = []
    skipped = 0
    for entry in entries:
        if not entry.is_dir():
            continue
        if entry.name not in CLASS_NAMES:
            raise ValueError(
                f"unexpected class folder {entry.name!r}; expected one of "
                f"{', '.join(CLASS_NAMES)}"
            )
        class_id = CLASS_NAMES.index(entry.name)
        for fname in sorted(os.listdir(entry.path)):
            fpath = os.path.join(entry.path, fname)
            if not os.path.isfile(fpath):
                continue
            try:
                with Image.open(fpath) as im:
                    im.verify()
            except (OSError, UnidentifiedImageError) as e:
                log.warning("skipping %s: %s", fpath, e)
                skipped += 1
                continue
            records.append(ManifestRecord(path=fpath, class_id=class_id, split=split))
    return Manifest(records=tuple(records), skipped=skipped)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "class_id", "split"])
        for r in manifest.records:
            w.writerow([r.path, r.class_id, r.split])


def load_manifest(path) -> Manifest:
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "class_id", "split"]:
            raise ValueError(f"{path}: not a manifest CSV (bad header {header})")
        for row in reader:
            if len(row) != 3:
                raise ValueError(f"{path}: malformed row {row}")
            records.append(ManifestRecord(row[0], int(row[1]), row[2]))
    return Manifest(records=tuple(records))


def balance(manifest: Manifest, seed: int) -> Manifest:
    """Downsample every class to the smallest class count, per split.

    Selection and final ordering are deterministic for a fixed seed.  Raises
    if any present split has an empty class.
    """
    rng = np.random.default_rng(seed)
    kept: list[ManifestRecord] = []
    for split in SPLITS:
        records = manifest.for_split(split)
        if not records:
            continue
        per_class = [[r for r in records if r.class_id == c] for c in range(len(CLASS_NAMES))]
        sizes = [len(p) for p in per_class]
        if min(sizes) == 0:
            empty = CLASS_NAMES[sizes.index(0)]
            raise ValueError(f"split {split!r}: class {empty!r} has no samples")
        target = min(sizes)
        chosen: list[ManifestRecord] = []
        for group in per_class:
            idx = rng.choice(len(group), size=target, replace=False)
            chosen.extend(group[i] for i in sorted(idx))
        order = rng.permutation(len(chosen))
        kept.extend(chosen[i] for i in order)
    return Manifest(records=tuple(kept), skipped=manifest.skipped)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Which randomized photometric/geometric ops may fire, and how hard.

    Each enabled op is applied with probability 0.5 per image.  With every
    flag off, augmentation is the identity.
    """

    contrast: bool = True
    brightness: bool = True
    noise: bool = True
    flip: bool = True
    rotate: bool = True
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_delta: float = 0.2
    noise_sigma: float = 0.02
    rotate_degrees: float = 15.0


def _rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, edge pixels clamped."""
    h, w, _ = img.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # Inverse map: sample source coordinates rotated by -theta.
    cos, sin = np.cos(theta), np.sin(theta)
    sy = cy + (yy - cy) * cos - (xx - cx) * sin
    sx = cx + (yy - cy) * sin + (xx - cx) * cos
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def augment(image: np.ndarray, seed, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Randomized augmentation of one uint8 image; deterministic per seed.

    Ops, in order: contrast scale, brightness shift, gaussian pixel noise,
    horizontal flip, small rotation.  Each enabled op fires on an independent
    coin flip.  Output is clipped back to uint8.
    """
    if image.dtype != np.uint8 or image.ndim != 3:
        raise ValueError("augment expects a (H, W, C) uint8 image")
    rng = np.random.default_rng(seed)
    x = image.astype(np.float64) / 255.0
    if config.contrast and rng.random() < 0.5:
        lo, hi = config.contrast_range
        factor = rng.uniform(lo, hi)
        x = 0.5 + (x - 0.5) * factor
    if config.brightness and rng.random() < 0.5:
        x = x + rng.uniform(-config.brightness_delta, config.brightness_delta)
    if config.noise and rng.random() < 0.5:
        x = x + rng.normal(0.0, config.noise_sigma, size=x.shape)
    if config.flip and rng.random() < 0.5:
        x = x[:, ::-1, :]
    if config.rotate and rng.random() < 0.5:
        x = _rotate_bilinear(x, rng.uniform(-config.rotate_degrees, config.rotate_degrees))
    x = np.clip(x, 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Array-backed datasets
# ---------------------------------------------------------------------------


@dataclass
class ArrayDataset:
    """In-memory image/label pairs."""

    images: np.ndarray  # (N, 32, 32, 3) uint8
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError("images must be a uint8 (N, H, W, C) array")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "ArrayDataset":
        idx = np.asarray(indices)
        return ArrayDataset(self.images[idx], self.labels[idx])


def load_image(path) -> np.ndarray:
    """Load any raster image as uint8 RGB resized to exactly 32x32."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (IMAGE_SIZE, IMAGE_SIZE):
                im = im.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise OSError(f"cannot load image {path}: {e}") from e


def dataset_from_manifest(manifest: Manifest, split: str) -> ArrayDataset:
    records = manifest.for_split(split)
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    images = np.stack([load_image(r.path) for r in records])
    labels = np.array([r.class_id for r in records], dtype=np.int64)
    return ArrayDataset(images, labels)


def synth_quadrant_dataset(n_per_class: int, seed: int) -> ArrayDataset:
    """Synthetic 4-class set: class k marks quadrant k with a checker patch.

    Quadrants are numbered 0 top-left, 1 top-right, 2 bottom-left,
    3 bottom-right.  Backgrounds are mid-gray noise; the patch is a bright /
    dark checkerboard whose position jitters inside its quadrant.  Labels are
    interleaved 0,1,2,3,0,1,... so any contiguous slice stays class-balanced.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    half = IMAGE_SIZE // 2
    patch = 12
    cell = 3
    n = 4 * n_per_class
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    labels = np.tile(np.arange(4, dtype=np.int64), n_per_class)

    tiles = (np.add.outer(np.arange(patch) // cell, np.arange(patch) // cell) % 2)
    for i in range(n):
        k = int(labels[i])
        bg = rng.normal(128.0, 16.0, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
        qy, qx = (k // 2) * half, (k % 2) * half
        oy = qy + rng.integers(0, half - patch + 1)
        ox = qx + rng.integers(0, half - patch + 1)
        hi = rng.uniform(225.0, 255.0)
        lo = rng.uniform(0.0, 30.0)
        block = np.where(tiles[..., None] == 1, hi, lo)
        bg[oy : oy + patch, ox : ox + patch, :] = block
        images[i] = np.clip(bg, 0.0, 255.0).round().astype(np.uint8)
    return ArrayDataset(images, labels)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(true_ids, pred_ids, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Counts[i, j] = samples of true class i predicted as class j."""
    t = np.asarray(true_ids, dtype=np.int64)
    p = np.asarray(pred_ids, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("true and predicted label arrays must align")
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise ValueError("label outside class range")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def metrics_from_confusion(matrix: np.ndarray, class_names=CLASS_NAMES) -> dict:
    """Accuracy plus per-class recall/precision from a confusion matrix.

    A class with no true samples is an error (recall undefined); a class that
    was never predicted gets precision None rather than a fake zero.
    """
    m = np.asarray(matrix, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(m < 0):
        raise ValueError("confusion matrix counts must be non-negative")
    row = m.sum(axis=1)
    col = m.sum(axis=0)
    total = int(m.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    if np.any(row == 0):
        missing = class_names[int(np.argmin(row))]
        raise ValueError(f"class {missing!r} has no true samples; recall undefined")
    diag = np.diag(m)
    per_class = []
    for c in range(m.shape[0]):
        per_class.append(
            {
                "class": class_names[c] if c < len(class_names) else str(c),
                "recall": float(diag[c] / row[c]),
                "precision": float(diag[c] / col[c]) if col[c] > 0 else None,
                "support": int(row[c]),
            }
        )
    return {
        "accuracy": float(diag.sum() / total),
        "total": total,
        "per_class": per_class,
    }
