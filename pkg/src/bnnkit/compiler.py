"""Compile trained models into packed binary weights and integer thresholds.

After training, each batch-norm + sign pair collapses into a per-channel
integer threshold on the layer accumulator, so inference needs no floating
point at all.  For a binary dot product d over F inputs with p agreeing bit
positions we have d = 2p - F, hence "BN output >= 0" becomes a comparison
of the popcount p against a precomputed integer.  Channels whose scale is
negative compare with <= instead (the flip bit).  The first layer runs on
8-bit integer pixels rather than packed bits and gets thresholds in that
accumulator domain instead.

Compiled models serialize to a little-endian binary container (magic
"BCOP").  See docs/formats.md for the field-by-field layout.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .bitcore import n_words, pack_bit_rows
from .errors import (
    BadMagicError,
    CompileWarning,
    HeaderBoundsError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .netspec import (
    CONV,
    FC,
    MAXPOOL,
    NetworkSpec,
    ShapeInfo,
    builtin_spec,
    infer_shapes,
)
from .train import BatchNormParams, TrainedModel

MODEL_MAGIC = b"BCOP"
MODEL_VERSION = 1

# Pixel quantization: uint8 p maps to (p - 128) / PIXEL_SCALE in [-1, 1).
PIXEL_SCALE = 128
PIXEL_OFFSET = 128

# Decision domains for compiled thresholds.
DOMAIN_POPCOUNT = "popcount"
DOMAIN_INTEGER = "integer"

_KIND_CODES = {CONV: 0, MAXPOOL: 1, FC: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

# Sanity bounds applied to header fields before any allocation.
_MAX_LAYERS = 256
_MAX_NAME_LEN = 64
_MAX_CHANNELS = 65536
_MAX_EXTENT = 4096
_MAX_FAN_IN = 1 << 24


@dataclass(frozen=True)
class ThresholdParams:
    """Per-channel integer activation thresholds for one layer.

    A channel fires (outputs bit 1) when its integer accumulator v satisfies
    v >= threshold, or v <= threshold for flipped channels.  In the popcount
    domain v is the XNOR popcount in [0, fan_in]; in the integer domain v is
    the signed first-layer accumulator.  Thresholds are normalized so that
    always-on and always-off channels use flip=False with a saturated
    threshold, never an out-of-range flipped one.
    """

    thresholds: np.ndarray  # (c_out,) int32
    flips: np.ndarray  # (c_out,) bool
    fan_in: int
    domain: str = DOMAIN_POPCOUNT

    def __post_init__(self):
        if self.domain not in (DOMAIN_POPCOUNT, DOMAIN_INTEGER):
            raise ValueError(f"unknown threshold domain {self.domain!r}")
        if self.thresholds.shape != self.flips.shape or self.thresholds.ndim != 1:
            raise ValueError("thresholds and flips must be matching 1-d arrays")
        lo, hi = self.bounds()
        t = self.thresholds
        if np.any(t < lo) or np.any(t > hi):
            raise ValueError(f"thresholds outside [{lo}, {hi}]")

    def bounds(self) -> tuple[int, int]:
        """Inclusive range of stored thresholds (always-off sits at the top)."""
        if self.domain == DOMAIN_POPCOUNT:
            return 0, self.fan_in + 1
        return -PIXEL_OFFSET * self.fan_in, (PIXEL_OFFSET - 1) * self.fan_in + 1

    @property
    def c_out(self) -> int:
        return self.thresholds.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ThresholdParams):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.fan_in == other.fan_in
            and np.array_equal(self.thresholds, other.thresholds)
            and np.array_equal(self.flips, other.flips)
        )


def apply_thresholds(params: ThresholdParams, acc: np.ndarray) -> np.ndarray:
    """Map integer accumulators (..., c_out) to output bits (uint8 0/1)."""
    t = params.thresholds
    ge = acc >= t
    le = acc <= t
    return np.where(params.flips, le, ge).astype(np.uint8)


def _fold_decision(
    tau_v: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    lo: int,
    hi: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Turn real-valued cutoffs into saturated integer thresholds.

    tau_v is the point where the batch-norm output crosses zero, expressed in
    the integer accumulator domain [lo, hi].  Positive-scale channels fire for
    v >= tau_v, negative-scale ones for v <= tau_v, zero-scale ones are
    constant sign(beta).  Returns (thresholds, flips, dead_channels).
    """
    c = tau_v.shape[0]
    thr = np.zeros(c, dtype=np.int64)
    flip = np.zeros(c, dtype=bool)
    always_on, always_off = lo, hi + 1

    pos = gamma > 0
    neg = gamma < 0
    zero = ~(pos | neg)

    # v >= ceil(tau) for positive scale; clamp saturated channels in range.
    t_pos = np.ceil(tau_v[pos])
    thr[pos] = np.clip(t_pos, always_on, always_off).astype(np.int64)

    # v <= floor(tau) for negative scale.  A flipped threshold at or above hi
    # accepts every v, and one below lo rejects every v; both are rewritten as
    # unflipped saturated thresholds so stored values stay in one range.
    t_neg = np.floor(tau_v[neg])
    neg_idx = np.flatnonzero(neg)
    on = t_neg >= hi
    off = t_neg < lo
    mid = ~(on | off)
    thr[neg_idx[on]] = always_on
    thr[neg_idx[off]] = always_off
    thr[neg_idx[mid]] = t_neg[mid].astype(np.int64)
    flip[neg_idx[mid]] = True

    # Zero scale: the layer output is constant sign(beta) regardless of input.
    thr[zero] = np.where(beta[zero] >= 0, always_on, always_off)
    dead = int(np.count_nonzero(zero))

    return thr.astype(np.int32), flip, dead


def fold_batchnorm_to_threshold(bn: BatchNormParams, fan_in: int) -> ThresholdParams:
    """Fold BN + sign over a binary dot product into popcount thresholds.

    The accumulator d = 2p - fan_in feeds batch norm; solving
    gamma * (d - mean) / sqrt(var + eps) + beta >= 0 for the popcount p gives
    an integer cutoff per channel.  Computed in float64.
    """
    gamma = bn.gamma.astype(np.float64)
    beta = bn.beta.astype(np.float64)
    mean = bn.running_mean.astype(np.float64)
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_d = mean - beta * std / gamma  # BN input where output crosses zero
    tau_p = (tau_d + fan_in) / 2.0
    thr, flip, dead = _fold_decision(tau_p, gamma, beta, 0, fan_in)
    if dead:
        warnings.warn(
            f"{dead} batch-norm channel(s) have zero scale; their outputs "
            "are constant",
            CompileWarning,
            stacklevel=2,
        )
    return ThresholdParams(thr, flip, fan_in, DOMAIN_POPCOUNT)


def fold_batchnorm_to_integer_threshold(
    bn: BatchNormParams, fan_in: int
) -> ThresholdParams:
    """Fold BN + sign over the integer first-layer accumulator.

    First-layer inputs are centered pixels q = p - 128 scaled by 1/128, so the
    float activation is Q / 128 for integer accumulator Q.  The BN zero
    crossing at activation tau becomes the integer cutoff 128 * tau.
    """
    gamma = bn.gamma.astype(np.float64)
    beta = bn.beta.astype(np.float64)
    mean = bn.running_mean.astype(np.float64)
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = mean - beta * std / gamma
    tau_q = PIXEL_SCALE * tau
    lo = -PIXEL_OFFSET * fan_in
    hi = (PIXEL_OFFSET - 1) * fan_in
    thr, flip, dead = _fold_decision(tau_q, gamma, beta, lo, hi)
    if dead:
        warnings.warn(
            f"{dead} batch-norm channel(s) have zero scale; their outputs "
            "are constant",
            CompileWarning,
            stacklevel=2,
        )
    return ThresholdParams(thr, flip, fan_in, DOMAIN_INTEGER)


@dataclass(frozen=True)
class CompiledLayer:
    """One stage of a compiled model.

    Weighted layers carry one packed bit row per output channel, laid out
    (ky, kx, c_in) for convolutions and flattened (y, x, c) fan-in for fully
    connected layers.  Pool layers carry geometry only.  The final classifier
    layer has no thresholds; it produces raw integer scores.
    """

    name: str
    kind: str
    k: int
    stride: int
    c_in: int
    c_out: int
    in_x: int
    in_y: int
    out_x: int
    out_y: int
    fan_in: int
    weight_words: np.ndarray | None = None  # (c_out, n_words) uint64
    thresholds: ThresholdParams | None = None
    integer_input: bool = False

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weight_words is not None:
            expect = (self.c_out, n_words(self.fan_in))
            if self.weight_words.shape != expect:
                raise ValueError(
                    f"{self.name}: weight words shaped {self.weight_words.shape}, "
                    f"expected {expect}"
                )
        if self.thresholds is not None and self.thresholds.c_out != self.c_out:
            raise ValueError(f"{self.name}: threshold channel count mismatch")

    @property
    def weighted(self) -> bool:
        return self.weight_words is not None

    def __eq__(self, other):
        if not isinstance(other, CompiledLayer):
            return NotImplemented
        if (
            self.name,
            self.kind,
            self.k,
            self.stride,
            self.c_in,
            self.c_out,
            self.in_x,
            self.in_y,
            self.out_x,
            self.out_y,
            self.fan_in,
            self.integer_input,
        ) != (
            other.name,
            other.kind,
            other.k,
            other.stride,
            other.c_in,
            other.c_out,
            other.in_x,
            other.in_y,
            other.out_x,
            other.out_y,
            other.fan_in,
            other.integer_input,
        ):
            return False
        if (self.weight_words is None) != (other.weight_words is None):
            return False
        if self.weight_words is not None and not np.array_equal(
            self.weight_words, other.weight_words
        ):
            return False
        return self.thresholds == other.thresholds


@dataclass(frozen=True)
class CompiledModel:
    """A fully folded model: packed weights, integer thresholds, geometry."""

    arch_name: str
    class_count: int
    input_size: int
    input_channels: int
    input_scale: int
    layers: tuple[CompiledLayer, ...]
    version: int = MODEL_VERSION

    def __eq__(self, other):
        if not isinstance(other, CompiledModel):
            return NotImplemented
        return (
            self.arch_name == other.arch_name
            and self.class_count == other.class_count
            and self.input_size == other.input_size
            and self.input_channels == other.input_channels
            and self.input_scale == other.input_scale
            and self.version == other.version
            and self.layers == other.layers
        )


def _pack_conv_rows(w: np.ndarray) -> np.ndarray:
    """(K, K, Ci, Co) latent weights -> (Co, n_words) packed sign bits."""
    k, _, ci, co = w.shape
    rows = np.transpose(w, (3, 0, 1, 2)).reshape(co, k * k * ci)
    return pack_bit_rows((rows >= 0).astype(np.uint8))


def _pack_fc_rows(w: np.ndarray) -> np.ndarray:
    """(Fin, Co) latent weights -> (Co, n_words) packed sign bits."""
    return pack_bit_rows((w.T >= 0).astype(np.uint8))


def compile_model(trained: TrainedModel, spec: NetworkSpec | None = None) -> CompiledModel:
    """Fold a trained float model into its integer/binary inference form."""
    spec = spec if spec is not None else trained.spec
    if spec.arch_name != trained.spec.arch_name:
        raise ValueError(
            f"model is {trained.spec.arch_name!r}, requested {spec.arch_name!r}"
        )
    shapes: ShapeInfo = infer_shapes(spec)
    compiled: list[CompiledLayer] = []
    first_weighted = True
    for i, layer in enumerate(spec.layers):
        sh = shapes.shapes[i]
        if layer.kind == MAXPOOL:
            compiled.append(
                CompiledLayer(
                    name=layer.name,
                    kind=MAXPOOL,
                    k=layer.k,
                    stride=layer.stride,
                    c_in=sh.in_c,
                    c_out=sh.out_c,
                    in_x=sh.in_x,
                    in_y=sh.in_y,
                    out_x=sh.out_x,
                    out_y=sh.out_y,
                    fan_in=0,
                )
            )
            continue
        params = trained.layers[i]
        if params.weights is None:
            raise ValueError(f"{layer.name}: trained model has no weights")
        if layer.kind == CONV:
            expect = (layer.k, layer.k, sh.in_c, sh.out_c)
            words = _pack_conv_rows
        else:
            expect = (sh.fan_in, sh.out_c)
            words = _pack_fc_rows
        if params.weights.shape != expect:
            raise ValueError(
                f"{layer.name}: weights shaped {params.weights.shape}, "
                f"expected {expect}"
            )
        if layer.has_bn_sign:
            if params.bn is None:
                raise ValueError(f"{layer.name}: missing batch-norm parameters")
            if first_weighted:
                thresholds = fold_batchnorm_to_integer_threshold(params.bn, sh.fan_in)
            else:
                thresholds = fold_batchnorm_to_threshold(params.bn, sh.fan_in)
        else:
            thresholds = None
        compiled.append(
            CompiledLayer(
                name=layer.name,
                kind=layer.kind,
                k=layer.k,
                stride=layer.stride,
                c_in=sh.in_c,
                c_out=sh.out_c,
                in_x=sh.in_x,
                in_y=sh.in_y,
                out_x=sh.out_x,
                out_y=sh.out_y,
                fan_in=sh.fan_in,
                weight_words=words(params.weights),
                thresholds=thresholds,
                integer_input=first_weighted,
            )
        )
        first_weighted = False
    return CompiledModel(
        arch_name=spec.arch_name,
        class_count=spec.num_classes,
        input_size=spec.input_size,
        input_channels=spec.input_channels,
        input_scale=PIXEL_SCALE,
        layers=tuple(compiled),
    )


# ---------------------------------------------------------------------------
# Serialization ("BCOP" container, version 1)
# ---------------------------------------------------------------------------


def _pack_flip_bitmap(flips: np.ndarray) -> bytes:
    return np.packbits(flips.astype(np.uint8), bitorder="little").tobytes()


def _unpack_flip_bitmap(raw: bytes, c_out: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[:c_out].astype(bool)


def _layer_payload_size(kind: str, c_out: int, fan_in: int, has_thr: bool) -> int:
    if kind == MAXPOOL:
        return 0
    size = c_out * n_words(fan_in) * 8
    if has_thr:
        size += c_out * 4 + (c_out + 7) // 8
    return size


def emit_model(model: CompiledModel, sink) -> None:
    """Write a compiled model to a path or binary file object."""
    if hasattr(sink, "write"):
        _emit(model, sink)
    else:
        with open(sink, "wb") as f:
            _emit(model, f)


def _emit(model: CompiledModel, f) -> None:
    name = model.arch_name.encode("utf-8")
    f.write(MODEL_MAGIC)
    f.write(struct.pack("<IH", model.version, len(name)))
    f.write(name)
    f.write(
        struct.pack(
            "<IIIII",
            model.class_count,
            model.input_size,
            model.input_channels,
            model.input_scale,
            len(model.layers),
        )
    )
    for layer in model.layers:
        lname = layer.name.encode("utf-8")
        flags = 0
        if layer.thresholds is not None:
            flags |= 1
        if layer.integer_input:
            flags |= 2
        f.write(struct.pack("<H", len(lname)))
        f.write(lname)
        f.write(
            struct.pack(
                "<BBIIIIIIIII",
                _KIND_CODES[layer.kind],
                flags,
                layer.k,
                layer.stride,
                layer.c_in,
                layer.c_out,
                layer.in_x,
                layer.in_y,
                layer.out_x,
                layer.out_y,
                layer.fan_in,
            )
        )
    for layer in model.layers:
        if layer.weight_words is None:
            continue
        f.write(layer.weight_words.astype("<u8").tobytes())
        if layer.thresholds is not None:
            f.write(layer.thresholds.thresholds.astype("<i4").tobytes())
            f.write(_pack_flip_bitmap(layer.thresholds.flips))


class _Reader:
    """Cursor over an in-memory model file with truncation checks."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(source) -> CompiledModel:
    """Read a compiled model from a path or binary file object.

    Raises BadMagicError, UnsupportedVersionError, TruncatedFileError or
    HeaderBoundsError on malformed input.  Header fields are bounds-checked
    before any array allocation.
    """
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as f:
            data = f.read()
    r = _Reader(data)
    if r.take(4) != MODEL_MAGIC:
        raise BadMagicError("not a compiled model file (bad magic)")
    version, name_len = r.unpack("<IH")
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"model format version {version} not supported")
    if name_len > _MAX_NAME_LEN:
        raise HeaderBoundsError(f"architecture name length {name_len} out of bounds")
    arch_name = r.take(name_len).decode("utf-8")
    class_count, input_size, input_channels, input_scale, layer_count = r.unpack(
        "<IIIII"
    )
    if not (1 <= class_count <= _MAX_CHANNELS):
        raise HeaderBoundsError(f"class count {class_count} out of bounds")
    if not (1 <= input_size <= _MAX_EXTENT) or not (
        1 <= input_channels <= _MAX_CHANNELS
    ):
        raise HeaderBoundsError("input geometry out of bounds")
    if input_scale != PIXEL_SCALE:
        raise HeaderBoundsError(f"unsupported input scale {input_scale}")
    if layer_count > _MAX_LAYERS:
        raise HeaderBoundsError(f"layer count {layer_count} out of bounds")

    headers = []
    payload = 0
    for _ in range(layer_count):
        (lname_len,) = r.unpack("<H")
        if lname_len > _MAX_NAME_LEN:
            raise HeaderBoundsError(f"layer name length {lname_len} out of bounds")
        lname = r.take(lname_len).decode("utf-8")
        kind_code, flags, k, stride, c_in, c_out, in_x, in_y, out_x, out_y, fan_in = (
            r.unpack("<BBIIIIIIIII")
        )
        if kind_code not in _KIND_NAMES:
            raise HeaderBoundsError(f"{lname}: unknown layer kind {kind_code}")
        kind = _KIND_NAMES[kind_code]
        if c_in > _MAX_CHANNELS or c_out > _MAX_CHANNELS:
            raise HeaderBoundsError(f"{lname}: channel count out of bounds")
        if max(in_x, in_y, out_x, out_y) > _MAX_EXTENT or k > _MAX_EXTENT:
            raise HeaderBoundsError(f"{lname}: extent out of bounds")
        if fan_in > _MAX_FAN_IN:
            raise HeaderBoundsError(f"{lname}: fan-in {fan_in} out of bounds")
        if kind != MAXPOOL and (c_out < 1 or fan_in < 1):
            raise HeaderBoundsError(f"{lname}: empty weighted layer")
        has_thr = bool(flags & 1)
        integer_input = bool(flags & 2)
        headers.append(
            (lname, kind, k, stride, c_in, c_out, in_x, in_y, out_x, out_y, fan_in,
             has_thr, integer_input)
        )
        payload += _layer_payload_size(kind, c_out, fan_in, has_thr)

    # One aggregate size check before touching payload bytes.
    expected = r.pos + payload
    if expected > len(data):
        raise TruncatedFileError(
            f"file ends at byte {len(data)}, payload needs {expected}"
        )
    if expected < len(data):
        raise TruncatedFileError(f"{len(data) - expected} trailing byte(s) after payload")

    layers = []
    for (lname, kind, k, stride, c_in, c_out, in_x, in_y, out_x, out_y, fan_in,
         has_thr, integer_input) in headers:
        if kind == MAXPOOL:
            layers.append(
                CompiledLayer(
                    name=lname, kind=kind, k=k, stride=stride, c_in=c_in,
                    c_out=c_out, in_x=in_x, in_y=in_y, out_x=out_x, out_y=out_y,
                    fan_in=0,
                )
            )
            continue
        nw = n_words(fan_in)
        words = (
            np.frombuffer(r.take(c_out * nw * 8), dtype="<u8")
            .reshape(c_out, nw)
            .astype(np.uint64)
        )
        thresholds = None
        if has_thr:
            thr = np.frombuffer(r.take(c_out * 4), dtype="<i4").astype(np.int32)
            flips = _unpack_flip_bitmap(r.take((c_out + 7) // 8), c_out)
            domain = DOMAIN_INTEGER if integer_input else DOMAIN_POPCOUNT
            try:
                thresholds = ThresholdParams(thr, flips, fan_in, domain)
            except ValueError as e:
                raise HeaderBoundsError(f"{lname}: {e}") from e
        layers.append(
            CompiledLayer(
                name=lname, kind=kind, k=k, stride=stride, c_in=c_in, c_out=c_out,
                in_x=in_x, in_y=in_y, out_x=out_x, out_y=out_y, fan_in=fan_in,
                weight_words=words, thresholds=thresholds,
                integer_input=integer_input,
            )
        )
    model = CompiledModel(
        arch_name=arch_name,
        class_count=class_count,
        input_size=input_size,
        input_channels=input_channels,
        input_scale=input_scale,
        layers=tuple(layers),
        version=version,
    )
    # Known architectures must round-trip onto their geometry.
    try:
        spec = builtin_spec(arch_name)
    except ValueError:
        return model
    if len(spec.layers) != len(model.layers):
        raise HeaderBoundsError(
            f"{arch_name}: expected {len(spec.layers)} layers, file has "
            f"{len(model.layers)}"
        )
    return model


def model_to_bytes(model: CompiledModel) -> bytes:
    buf = io.BytesIO()
    emit_model(model, buf)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> CompiledModel:
    return load_model(io.BytesIO(data))
