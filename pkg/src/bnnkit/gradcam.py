"""Gradient-weighted class activation maps for the trained classifiers.

The heatmap is computed on the latent-weight network in evaluation form
(running batch-norm statistics, no input perturbation): backpropagate the
chosen class score to the output of the second pooling stage, weight each
channel of that 5x5 activation block by its spatially averaged gradient,
sum, and clamp negatives to zero.  The 5x5 map is bilinearly upsampled to
the 32x32 input frame and normalized to [0, 1] for rendering.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .netspec import MAXPOOL
from .nn import quantize_pixels
from .train import TrainedModel, backward, forward_train, predict

# Piecewise-linear heat colormap: black -> blue -> cyan -> yellow -> red.
_CMAP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_CMAP_RGB = np.array(
    [
        [0, 0, 0],
        [0, 0, 255],
        [0, 255, 255],
        [255, 255, 0],
        [255, 0, 0],
    ],
    dtype=np.float64,
)

OVERLAY_ALPHA = 0.5


@dataclass(frozen=True)
class Heatmap:
    """Raw and display-ready class activation maps for one image.

    `raw` is the non-negative 5x5 map straight off the pooled features;
    `upsampled` is its 32x32 bilinear enlargement scaled into [0, 1].
    `norm_range` records the (min, max) used for that scaling.
    """

    raw: np.ndarray
    upsampled: np.ndarray
    class_id: int
    norm_range: tuple[float, float]


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-d array with half-pixel center alignment."""
    h, w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid.astype(np.float64)
    top = g[y0[:, None], x0[None, :]] * (1 - fx) + g[y0[:, None], x1[None, :]] * fx
    bot = g[y1[:, None], x0[None, :]] * (1 - fx) + g[y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def _pool_target_index(model: TrainedModel) -> int:
    pools = [i for i, l in enumerate(model.spec.layers) if l.kind == MAXPOOL]
    if len(pools) < 2:
        raise ValueError(
            f"{model.spec.arch_name}: no second pooling stage to hook"
        )
    return pools[1]


def grad_cam(model: TrainedModel, image: np.ndarray, class_id: int) -> Heatmap:
    """Class activation heatmap for one uint8 (32, 32, 3) image."""
    spec = model.spec
    if not 0 <= class_id < spec.num_classes:
        raise ValueError(f"class id {class_id} outside 0..{spec.num_classes - 1}")
    expect = (spec.input_size, spec.input_size, spec.input_channels)
    if image.shape != expect or image.dtype != np.uint8:
        raise ValueError(f"image must be uint8 {expect}")
    target = _pool_target_index(model)

    x = quantize_pixels(image[None])
    record = forward_train(model, x, training=False, dtype=np.float64)
    dlogits = np.zeros_like(record.logits)
    dlogits[0, class_id] = 1.0
    _, dtarget = backward(model, record, dlogits, stop_layer=target)

    act = record.outputs[target][0]  # (5, 5, C) of {-1, +1}
    channel_w = dtarget[0].mean(axis=(0, 1))  # (C,)
    raw = np.maximum(act @ channel_w, 0.0)

    up = bilinear_upsample(raw, spec.input_size, spec.input_size)
    peak = float(up.max())
    normalized = up / peak if peak > 0 else up
    return Heatmap(
        raw=raw, upsampled=normalized, class_id=class_id, norm_range=(0.0, peak)
    )


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to RGB uint8 via the fixed heat palette."""
    v = np.clip(values, 0.0, 1.0).ravel()
    rgb = np.stack(
        [np.interp(v, _CMAP_STOPS, _CMAP_RGB[:, c]) for c in range(3)], axis=-1
    )
    return np.round(rgb).astype(np.uint8).reshape(*values.shape, 3)


def render_overlay(heatmap: Heatmap, image: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Alpha-blend the colored heatmap over the input image (uint8 RGB)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    heat = colormap(heatmap.upsampled).astype(np.float64)
    base = image.astype(np.float64)
    return np.round((1.0 - alpha) * base + alpha * heat).astype(np.uint8)


def save_overlay(
    heatmap: Heatmap,
    image: np.ndarray,
    path,
    alpha: float = OVERLAY_ALPHA,
) -> None:
    """Write the blended overlay as a PNG; failures name the output path."""
    blended = render_overlay(heatmap, image, alpha)
    try:
        Image.fromarray(blended, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise OSError(f"cannot write overlay {path}: {e}") from e


def overlay_batch(
    model: TrainedModel,
    images: np.ndarray,
    out_dir,
    class_ids: np.ndarray | None = None,
    alpha: float = OVERLAY_ALPHA,
) -> dict:
    """Write one overlay PNG per image plus a JSON manifest.

    When `class_ids` is omitted the model's own predictions are explained.
    Returns the manifest dictionary (also written to manifest.json).
    """
    if images.ndim != 4:
        raise ValueError("images must be a (N, H, W, C) batch")
    if class_ids is None:
        class_ids, _ = predict(model, images)
    class_ids = np.asarray(class_ids)
    if class_ids.shape != (images.shape[0],):
        raise ValueError("class_ids length must match the batch")
    os.makedirs(out_dir, exist_ok=True)
    items = []
    for i, (image, cid) in enumerate(zip(images, class_ids)):
        hm = grad_cam(model, image, int(cid))
        name = f"gradcam_{i:04d}_class{int(cid)}.png"
        save_overlay(hm, image, os.path.join(out_dir, name), alpha)
        items.append(
            {
                "index": i,
                "file": name,
                "class_id": int(cid),
                "peak": hm.norm_range[1],
            }
        )
    manifest = {"arch": model.spec.arch_name, "alpha": alpha, "items": items}
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise OSError(f"cannot write manifest in {out_dir}: {e}") from e
    return manifest
