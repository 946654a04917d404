"""Bit-exact execution of compiled models.

Feature maps travel between layers as streams of packed bit rows, one row
per spatial position.  Each weighted layer is executed as a matrix-vector
unit: every output channel XNORs its packed weight row against the input
window, popcounts the agreement, and compares against the folded integer
threshold.  Max-pooling over {-1,+1} features is a bitwise OR.  The first
layer works on centered 8-bit pixel integers instead of packed bits, and
the final layer emits raw integer scores instead of thresholded bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitcore import (
    WORD_BITS,
    n_words,
    pack_bit_rows,
    popcount_rows,
    unpack_bit_rows,
    valid_mask_words,
)
from .compiler import (
    CompiledLayer,
    CompiledModel,
    PIXEL_OFFSET,
    ThresholdParams,
    apply_thresholds,
)
from .netspec import CONV, FC, MAXPOOL


@dataclass(frozen=True)
class FeatureStream:
    """A feature map in stream order: one vector per (y, x) position, row-major.

    Exactly one of `bits` (packed rows, uint64) or `ints` (integer rows) is
    set.  `vec_len` is the per-position vector length in elements; packed rows
    use ceil(vec_len / 64) words with zeroed padding bits.
    """

    width: int
    height: int
    vec_len: int
    bits: np.ndarray | None = None  # (width * height, n_words) uint64
    ints: np.ndarray | None = None  # (width * height, vec_len) int32

    def __post_init__(self):
        if (self.bits is None) == (self.ints is None):
            raise ValueError("exactly one of bits/ints must be set")
        count = self.width * self.height
        if self.bits is not None:
            expect = (count, n_words(self.vec_len))
            if self.bits.shape != expect:
                raise ValueError(f"bits shaped {self.bits.shape}, expected {expect}")
        else:
            if self.ints.shape != (count, self.vec_len):
                raise ValueError(
                    f"ints shaped {self.ints.shape}, expected {(count, self.vec_len)}"
                )

    @property
    def count(self) -> int:
        return self.width * self.height


def stream_from_bits(bits: np.ndarray) -> FeatureStream:
    """Pack a (height, width, channels) array of 0/1 bits into a stream."""
    h, w, c = bits.shape
    rows = pack_bit_rows(bits.reshape(h * w, c).astype(np.uint8))
    return FeatureStream(width=w, height=h, vec_len=c, bits=rows)


def stream_to_bits(stream: FeatureStream) -> np.ndarray:
    """Unpack a bit stream to a (height, width, channels) array of 0/1."""
    rows = unpack_bit_rows(stream.bits, stream.vec_len)
    return rows.reshape(stream.height, stream.width, stream.vec_len)


def stream_from_image(image: np.ndarray) -> FeatureStream:
    """Center uint8 pixels to signed integers q = p - 128, one row per pixel."""
    if image.dtype != np.uint8 or image.ndim != 3:
        raise ValueError("image must be a (H, W, C) uint8 array")
    h, w, c = image.shape
    q = image.astype(np.int32) - PIXEL_OFFSET
    return FeatureStream(width=w, height=h, vec_len=c, ints=q.reshape(h * w, c))


def sliding_window(stream: FeatureStream, k: int, stride: int = 1) -> FeatureStream:
    """Reshape a feature stream into k x k windows for a valid convolution.

    Output position (oy, ox) holds the flattened (ky, kx, c) window starting
    at (oy * stride, ox * stride).  Window vectors are repacked so each output
    row is one contiguous dot-product operand.
    """
    if k < 1 or stride < 1:
        raise ValueError("window size and stride must be positive")
    if k > stream.width or k > stream.height:
        raise ValueError(
            f"window {k} exceeds feature extent {stream.height}x{stream.width}"
        )
    oh = (stream.height - k) // stride + 1
    ow = (stream.width - k) // stride + 1
    c = stream.vec_len
    if stream.bits is not None:
        plane = stream_to_bits(stream)
    else:
        plane = stream.ints.reshape(stream.height, stream.width, c)
    sy, sx, sc = plane.strides
    windows = np.lib.stride_tricks.as_strided(
        plane,
        shape=(oh, ow, k, k, c),
        strides=(sy * stride, sx * stride, sy, sx, sc),
        writeable=False,
    )
    rows = windows.reshape(oh * ow, k * k * c)
    if stream.bits is not None:
        return FeatureStream(
            width=ow, height=oh, vec_len=k * k * c, bits=pack_bit_rows(rows)
        )
    return FeatureStream(
        width=ow, height=oh, vec_len=k * k * c, ints=np.ascontiguousarray(rows)
    )


def flatten_stream(stream: FeatureStream) -> FeatureStream:
    """Concatenate all positions (row-major) into a single 1x1 window."""
    total = stream.count * stream.vec_len
    if stream.bits is not None:
        rows = unpack_bit_rows(stream.bits, stream.vec_len)
        flat = pack_bit_rows(rows.reshape(1, total))
        return FeatureStream(width=1, height=1, vec_len=total, bits=flat)
    return FeatureStream(
        width=1, height=1, vec_len=total, ints=stream.ints.reshape(1, total)
    )


def maxpool_or(stream: FeatureStream, k: int = 2) -> FeatureStream:
    """Max-pool a binary stream; over {-1,+1} encoded as bits this is an OR."""
    if stream.bits is None:
        raise ValueError("max-pooling is defined on binary streams only")
    if stream.width % k or stream.height % k:
        raise ValueError(
            f"pool {k} does not divide extent {stream.height}x{stream.width}"
        )
    plane = stream_to_bits(stream)
    h, w, c = plane.shape
    pooled = (
        plane.reshape(h // k, k, w // k, k, c).max(axis=(1, 3)).astype(np.uint8)
    )
    return stream_from_bits(pooled)


@dataclass(frozen=True)
class MvtuConfig:
    """Folding geometry for one matrix-vector unit: PE x SIMD lanes.

    PE must divide the (padded) output channel count and SIMD the fan-in.
    Folding only changes scheduling, never results.
    """

    pe: int
    simd: int

    def __post_init__(self):
        if self.pe < 1 or self.simd < 1:
            raise ValueError("pe and simd must be >= 1")

    def validate(self, c_out_padded: int, fan_in: int) -> None:
        if c_out_padded % self.pe:
            raise ValueError(
                f"pe={self.pe} does not divide output channels {c_out_padded}"
            )
        if fan_in % self.simd:
            raise ValueError(f"simd={self.simd} does not divide fan-in {fan_in}")


def _popcount_agreement(
    weight_words: np.ndarray, window_words: np.ndarray, fan_in: int
) -> np.ndarray:
    """Count agreeing positions between each window row and each weight row.

    Returns (n_windows, c_out) int32.  Padding bits are masked out before
    counting, so stored tail garbage cannot affect results.
    """
    mask = valid_mask_words(fan_in)
    agree = (~(window_words[:, None, :] ^ weight_words[None, :, :])) & mask
    counts = np.bitwise_count(agree).sum(axis=2, dtype=np.int64)
    return counts.astype(np.int32)


def _execute_rows(layer: CompiledLayer, stream: FeatureStream) -> np.ndarray:
    """Integer accumulators for every stream position: (count, c_out) int32."""
    if layer.integer_input:
        if stream.ints is None:
            raise ValueError(f"{layer.name}: expected integer input stream")
        w = unpack_bit_rows(layer.weight_words, layer.fan_in).astype(np.int32)
        w = w * 2 - 1  # bit 1 -> +1, bit 0 -> -1
        return stream.ints.astype(np.int32) @ w.T
    if stream.bits is None:
        raise ValueError(f"{layer.name}: expected binary input stream")
    p = _popcount_agreement(layer.weight_words, stream.bits, layer.fan_in)
    if layer.thresholds is not None:
        return p
    return 2 * p - layer.fan_in  # signed dot product for the score layer


def mvtu_execute(
    cfg: MvtuConfig | None,
    layer: CompiledLayer,
    window: FeatureStream,
):
    """Run one weighted layer over a single window (a 1x1 stream).

    Returns a binary FeatureStream for thresholded layers or an int32 score
    vector for the final layer.  `cfg` only asserts that the folding geometry
    is valid; results are independent of it.
    """
    if not layer.weighted:
        raise ValueError(f"{layer.name} has no weights")
    if window.count != 1:
        raise ValueError("mvtu_execute expects a single-window stream")
    if window.vec_len != layer.fan_in:
        raise ValueError(
            f"{layer.name}: window length {window.vec_len} != fan-in {layer.fan_in}"
        )
    if cfg is not None:
        # The score layer is padded to a 64-channel bank for folding purposes.
        padded = layer.c_out if layer.thresholds is not None else max(layer.c_out, 64)
        cfg.validate(padded, layer.fan_in)
    acc = _execute_rows(layer, window)
    if layer.thresholds is None:
        return acc[0]
    bits = apply_thresholds(layer.thresholds, acc)
    return FeatureStream(width=1, height=1, vec_len=layer.c_out, bits=pack_bit_rows(bits))


def run_layer(layer: CompiledLayer, stream: FeatureStream) -> FeatureStream | np.ndarray:
    """Apply one compiled layer to a feature stream."""
    if layer.kind == MAXPOOL:
        return maxpool_or(stream, layer.k)
    if layer.kind == CONV:
        windows = sliding_window(stream, layer.k, layer.stride)
    else:
        windows = flatten_stream(stream)
        if windows.vec_len != layer.fan_in:
            raise ValueError(
                f"{layer.name}: flattened length {windows.vec_len} != fan-in "
                f"{layer.fan_in}"
            )
    acc = _execute_rows(layer, windows)
    if layer.thresholds is None:
        if layer.kind == CONV:
            raise ValueError(f"{layer.name}: convolution without thresholds")
        return acc[0]
    bits = apply_thresholds(layer.thresholds, acc)
    return FeatureStream(
        width=windows.width,
        height=windows.height,
        vec_len=layer.c_out,
        bits=pack_bit_rows(bits),
    )


def _classify_one(model: CompiledModel, image: np.ndarray) -> np.ndarray:
    stream: FeatureStream | np.ndarray = stream_from_image(image)
    for layer in model.layers:
        stream = run_layer(layer, stream)
    if not isinstance(stream, np.ndarray):
        raise ValueError("model does not end in a score layer")
    return stream.astype(np.int32)


def classify(model: CompiledModel, images: np.ndarray):
    """Run compiled inference on one (H, W, C) image or an (N, H, W, C) batch.

    Returns (class_id, scores) for a single image and (class_ids, scores)
    arrays for a batch.  Batch results equal per-image results; ordering is
    preserved.
    """
    if images.dtype != np.uint8:
        raise ValueError("images must be uint8")
    expect = (model.input_size, model.input_size, model.input_channels)
    if images.ndim == 3:
        if images.shape != expect:
            raise ValueError(f"image shaped {images.shape}, expected {expect}")
        scores = _classify_one(model, images)[: model.class_count]
        return int(np.argmax(scores)), scores
    if images.ndim == 4:
        if images.shape[1:] != expect:
            raise ValueError(f"batch shaped {images.shape[1:]}, expected {expect}")
        all_scores = np.stack(
            [_classify_one(model, img)[: model.class_count] for img in images]
        )
        return np.argmax(all_scores, axis=1).astype(np.int64), all_scores
    raise ValueError("images must be 3-d (single) or 4-d (batch)")
