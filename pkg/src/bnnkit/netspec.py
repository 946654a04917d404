"""Declarative network descriptions, shape inference and binary-op accounting.

Three built-in architectures are provided (``cnv``, ``n-cnv``, ``u-cnv``).
They are linear pipelines of 3x3 valid convolutions, 2x2 max-pools after the
first two conv groups, and fully-connected layers; inputs are 32x32 RGB and
there are 4 output classes.

Two conventions here are reverse-engineered rather than given explicitly and
are load-bearing for the op/cycle goldens (see docs/formats.md):

* convolutions are "valid" (no zero padding), stride 1 -- the only padding
  scheme consistent with the published per-layer op counts;
* the final FC layer is padded to 64 output channels for op and cycle
  accounting (its real width is the class count; extra logits are ignored).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

CONV = "conv"
MAXPOOL = "maxpool"
FC = "fc"

INPUT_SIZE = 32
INPUT_CHANNELS = 3
NUM_CLASSES = 4

# Output-channel padding applied to the last FC layer for op/cycle accounting.
FINAL_FC_PAD = 64

SPEC_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    k: int = 1
    c_in: int = 0
    c_out: int = 0
    stride: int = 1
    has_bn_sign: bool = False

    def __post_init__(self):
        if self.kind not in (CONV, MAXPOOL, FC):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in (CONV, FC) and (self.c_in < 1 or self.c_out < 1):
            raise ValueError(f"{self.name}: conv/fc layers need c_in, c_out >= 1")

    @property
    def weighted(self) -> bool:
        return self.kind in (CONV, FC)


@dataclass(frozen=True)
class NetworkSpec:
    arch_name: str
    layers: tuple[LayerSpec, ...]
    input_size: int = INPUT_SIZE
    input_channels: int = INPUT_CHANNELS
    num_classes: int = NUM_CLASSES

    @property
    def weighted_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.weighted)

    def is_final(self, layer: LayerSpec) -> bool:
        return layer is self.layers[-1]

    def padded_c_out(self, layer: LayerSpec) -> int:
        if self.is_final(layer) and layer.kind == FC:
            return max(layer.c_out, FINAL_FC_PAD)
        return layer.c_out


@dataclass(frozen=True)
class LayerShape:
    in_x: int
    in_y: int
    in_c: int
    out_x: int
    out_y: int
    out_c: int
    fan_in: int  # k*k*c_in for conv, flattened input length for fc, 0 for pool


@dataclass(frozen=True)
class ShapeInfo:
    shapes: tuple[LayerShape, ...] = field(default=())

    def by_name(self, spec: NetworkSpec) -> dict[str, LayerShape]:
        return {l.name: s for l, s in zip(spec.layers, self.shapes)}


def _conv_block(prefix: str, pairs: list[tuple[int, int]]) -> list[LayerSpec]:
    return [
        LayerSpec(f"{prefix}_{i + 1}", CONV, k=3, c_in=ci, c_out=co, has_bn_sign=True)
        for i, (ci, co) in enumerate(pairs)
    ]


def _pool(name: str, channels: int) -> LayerSpec:
    return LayerSpec(name, MAXPOOL, k=2, c_in=channels, c_out=channels, stride=2)


def _fc(name: str, c_in: int, c_out: int, final: bool) -> LayerSpec:
    return LayerSpec(name, FC, c_in=c_in, c_out=c_out, has_bn_sign=not final)


def _build_cnv() -> NetworkSpec:
    layers = (
        *_conv_block("conv1", [(3, 64), (64, 64)]),
        _pool("pool1", 64),
        *_conv_block("conv2", [(64, 128), (128, 128)]),
        _pool("pool2", 128),
        *_conv_block("conv3", [(128, 256), (256, 256)]),
        _fc("fc1", 256, 512, final=False),
        _fc("fc2", 512, 512, final=False),
        _fc("fc3", 512, NUM_CLASSES, final=True),
    )
    return NetworkSpec("cnv", layers)


def _build_ncnv() -> NetworkSpec:
    layers = (
        *_conv_block("conv1", [(3, 16), (16, 16)]),
        _pool("pool1", 16),
        *_conv_block("conv2", [(16, 32), (32, 32)]),
        _pool("pool2", 32),
        *_conv_block("conv3", [(32, 64), (64, 64)]),
        _fc("fc1", 64, 128, final=False),
        _fc("fc2", 128, 128, final=False),
        _fc("fc3", 128, NUM_CLASSES, final=True),
    )
    return NetworkSpec("n-cnv", layers)


def _build_ucnv() -> NetworkSpec:
    layers = (
        *_conv_block("conv1", [(3, 16), (16, 16)]),
        _pool("pool1", 16),
        *_conv_block("conv2", [(16, 32), (32, 32)]),
        _pool("pool2", 32),
        LayerSpec("conv3_1", CONV, k=3, c_in=32, c_out=64, has_bn_sign=True),
        _fc("fc1", 576, 128, final=False),
        _fc("fc2", 128, NUM_CLASSES, final=True),
    )
    return NetworkSpec("u-cnv", layers)


_BUILDERS = {"cnv": _build_cnv, "n-cnv": _build_ncnv, "u-cnv": _build_ucnv}

_ALIASES = {
    "cnv": "cnv",
    "n-cnv": "n-cnv",
    "ncnv": "n-cnv",
    "u-cnv": "u-cnv",
    "ucnv": "u-cnv",
    "µ-cnv": "u-cnv",  # micro sign
    "μ-cnv": "u-cnv",  # greek mu
}


def canonical_arch_name(name: str) -> str:
    key = name.strip().lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown architecture {name!r}; expected one of cnv, n-cnv, u-cnv")
    return _ALIASES[key]


def builtin_spec(arch_name: str) -> NetworkSpec:
    """Return the built-in layer list for one of the three architectures."""
    return _BUILDERS[canonical_arch_name(arch_name)]()


def infer_shapes(spec: NetworkSpec) -> ShapeInfo:
    """Annotate every layer with input/output extents and fan-in.

    Raises ``ValueError`` on channel mismatches, odd extents fed to a pool,
    or windows larger than their input.
    """
    x = y = spec.input_size
    c = spec.input_channels
    shapes = []
    for layer in spec.layers:
        if layer.kind == CONV:
            if layer.c_in != c:
                raise ValueError(f"{layer.name}: expects {layer.c_in} channels, got {c}")
            if layer.k > x or layer.k > y:
                raise ValueError(f"{layer.name}: {layer.k}x{layer.k} window exceeds {x}x{y} input")
            ox, oy = x - layer.k + 1, y - layer.k + 1
            shapes.append(LayerShape(x, y, c, ox, oy, layer.c_out, layer.k * layer.k * c))
            x, y, c = ox, oy, layer.c_out
        elif layer.kind == MAXPOOL:
            if x % 2 or y % 2:
                raise ValueError(f"{layer.name}: pool needs even extents, got {x}x{y}")
            shapes.append(LayerShape(x, y, c, x // 2, y // 2, c, 0))
            x, y = x // 2, y // 2
        else:  # FC consumes the flattened producer output
            fan_in = x * y * c
            if layer.c_in != fan_in:
                raise ValueError(
                    f"{layer.name}: expects fan-in {layer.c_in}, producer flattens to {fan_in}"
                )
            shapes.append(LayerShape(x, y, c, 1, 1, layer.c_out, fan_in))
            x, y, c = 1, 1, layer.c_out
    return ShapeInfo(tuple(shapes))


def count_binary_ops(spec: NetworkSpec, shapes: ShapeInfo) -> dict[str, int]:
    """Per-layer binary op counts (XNOR and popcount counted separately).

    conv: 2 * k^2 * c_in * c_out * out_x * out_y
    fc:   2 * fan_in * padded c_out
    pools contribute 0.
    """
    counts: dict[str, int] = {}
    for layer, shape in zip(spec.layers, shapes.shapes):
        if layer.kind == CONV:
            counts[layer.name] = (
                2 * layer.k * layer.k * layer.c_in * layer.c_out * shape.out_x * shape.out_y
            )
        elif layer.kind == FC:
            counts[layer.name] = 2 * shape.fan_in * spec.padded_c_out(layer)
        else:
            counts[layer.name] = 0
    return counts


def spec_to_json(spec: NetworkSpec) -> str:
    doc = {
        "format": "bnnkit-netspec",
        "version": SPEC_FORMAT_VERSION,
        "arch": spec.arch_name,
        "input": {
            "size": spec.input_size,
            "channels": spec.input_channels,
        },
        "classes": spec.num_classes,
        "layers": [
            {
                "name": l.name,
                "kind": l.kind,
                "k": l.k,
                "c_in": l.c_in,
                "c_out": l.c_out,
                "stride": l.stride,
                "has_bn_sign": l.has_bn_sign,
            }
            for l in spec.layers
        ],
    }
    return json.dumps(doc, indent=2)


def spec_from_json(text: str) -> NetworkSpec:
    doc = json.loads(text)
    if doc.get("format") != "bnnkit-netspec":
        raise ValueError("not a bnnkit network description")
    if doc.get("version") != SPEC_FORMAT_VERSION:
        raise ValueError(f"unsupported netspec version {doc.get('version')!r}")
    layers = tuple(
        LayerSpec(
            name=d["name"],
            kind=d["kind"],
            k=d["k"],
            c_in=d["c_in"],
            c_out=d["c_out"],
            stride=d["stride"],
            has_bn_sign=d["has_bn_sign"],
        )
        for d in doc["layers"]
    )
    return NetworkSpec(
        arch_name=doc["arch"],
        layers=layers,
        input_size=doc["input"]["size"],
        input_channels=doc["input"]["channels"],
        num_classes=doc["classes"],
    )
