"""Analytic performance model for folded matrix-vector pipelines.

Each weighted layer is executed by a matrix-vector unit folded over PE
output lanes and SIMD input lanes.  With a weight matrix of Wmat inputs by
Co outputs applied Nvec times per image, the layer needs

    cycles = ceil(Co / PE) * ceil(Wmat / SIMD) * Nvec

cycles per image.  In a streaming pipeline the slowest layer sets the
throughput (one image per bottleneck-cycles at the target clock) and the
per-image latency is the sum over layers.  Pool stages are free.  The
4-channel classifier layer is padded to a 64-channel bank, matching how
its weights are stored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .netspec import (
    LayerSpec,
    LayerShape,
    NetworkSpec,
    ShapeInfo,
    count_binary_ops,
    infer_shapes,
)
from .errors import BnnkitError

DEFAULT_CLOCK_HZ = 100_000_000


class PerfModelError(BnnkitError):
    """Invalid folding configuration."""


@dataclass(frozen=True)
class FoldingConfig:
    """PE and SIMD lane counts per weighted layer, keyed by layer name."""

    pe: dict[str, int]
    simd: dict[str, int]

    def lanes(self, name: str) -> tuple[int, int]:
        if name not in self.pe or name not in self.simd:
            raise PerfModelError(f"no folding entry for layer {name!r}")
        return self.pe[name], self.simd[name]

    @property
    def total_pe(self) -> int:
        return sum(self.pe.values())

    @property
    def total_simd(self) -> int:
        return sum(self.simd.values())


def _folding_from_lists(names: list[str], pe: list[int], simd: list[int]) -> FoldingConfig:
    if len(names) != len(pe) or len(names) != len(simd):
        raise PerfModelError("folding list length does not match weighted layers")
    return FoldingConfig(pe=dict(zip(names, pe)), simd=dict(zip(names, simd)))


_WEIGHTED_NAMES = {
    "cnv": ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2",
            "fc1", "fc2", "fc3"],
    "n-cnv": ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2",
              "fc1", "fc2", "fc3"],
    "u-cnv": ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "fc1", "fc2"],
}

# Reference folding per architecture (PE lanes, then SIMD lanes, in layer order).
_REFERENCE_LANES = {
    "cnv": ([16, 32, 16, 16, 4, 1, 1, 1, 4], [3, 32, 32, 32, 32, 32, 4, 8, 1]),
    "n-cnv": ([16, 16, 16, 16, 4, 1, 1, 1, 1], [3, 16, 16, 32, 32, 32, 4, 8, 1]),
    "u-cnv": ([4, 4, 4, 4, 1, 1, 1], [3, 16, 16, 32, 32, 16, 1]),
}


def reference_folding(arch_name: str) -> FoldingConfig:
    """The published folding for a built-in architecture."""
    from .netspec import canonical_arch_name

    name = canonical_arch_name(arch_name)
    pe, simd = _REFERENCE_LANES[name]
    return _folding_from_lists(_WEIGHTED_NAMES[name], pe, simd)


def matrix_dims(spec: NetworkSpec, layer: LayerSpec, shape: LayerShape) -> tuple[int, int, int]:
    """(Wmat, Co_padded, Nvec) for one weighted layer."""
    if not layer.weighted:
        raise PerfModelError(f"{layer.name} is not a weighted layer")
    wmat = shape.fan_in
    co = spec.padded_c_out(layer)
    nvec = shape.out_x * shape.out_y if layer.kind == "conv" else 1
    return wmat, co, nvec


def layer_cycles(
    spec: NetworkSpec, layer: LayerSpec, shape: LayerShape, pe: int, simd: int
) -> int:
    """Per-image cycles for one layer; pool stages cost nothing."""
    if not layer.weighted:
        return 0
    wmat, co, nvec = matrix_dims(spec, layer, shape)
    if pe < 1 or simd < 1:
        raise PerfModelError(f"{layer.name}: pe and simd must be >= 1")
    if pe > co or simd > wmat:
        raise PerfModelError(
            f"{layer.name}: folding {pe}x{simd} exceeds matrix {co}x{wmat}"
        )
    return math.ceil(co / pe) * math.ceil(wmat / simd) * nvec


def weight_memory(
    spec: NetworkSpec, layer: LayerSpec, shape: LayerShape, pe: int, simd: int
) -> dict:
    """Weight storage footprint of one folded layer.

    Each PE keeps its share of the weight matrix in a private buffer of
    SIMD-bit entries.  Idle tail entries from ceil rounding waste one partial
    row per PE at most; `fragmentation_entries` counts the PE buffers that
    may carry such padding.
    """
    wmat, co, _ = matrix_dims(spec, layer, shape)
    depth = math.ceil(co / pe) * math.ceil(wmat / simd)
    return {
        "layer": layer.name,
        "total_bits": wmat * co,
        "entry_bits": simd,
        "per_pe_depth": depth,
        "fragmentation_entries": pe,
    }


def validate_folding(spec: NetworkSpec, folding: FoldingConfig) -> None:
    """Raise PerfModelError naming the first layer whose folding is invalid."""
    shapes = infer_shapes(spec).by_name(spec)
    for layer in spec.weighted_layers:
        pe, simd = folding.lanes(layer.name)
        wmat, co, _ = matrix_dims(spec, layer, shapes[layer.name])
        if pe < 1 or simd < 1 or pe > co or simd > wmat:
            raise PerfModelError(
                f"{layer.name}: folding pe={pe} simd={simd} invalid for "
                f"matrix {co}x{wmat}"
            )


@dataclass(frozen=True)
class LayerReport:
    name: str
    kind: str
    ops: int
    cycles: int
    pe: int
    simd: int
    weight_bits: int
    per_pe_depth: int


@dataclass(frozen=True)
class PipelineReport:
    """Per-layer cost plus pipeline-level figures for one folded network."""

    arch_name: str
    clock_hz: int
    layers: tuple[LayerReport, ...]
    bottleneck: str
    throughput_setter: str
    max_cycles: int
    latency_cycles: int

    @property
    def throughput_fps(self) -> float:
        return self.clock_hz / self.max_cycles

    @property
    def latency_s(self) -> float:
        return self.latency_cycles / self.clock_hz

    def to_json(self) -> dict:
        return {
            "arch": self.arch_name,
            "clock_hz": self.clock_hz,
            "layers": [
                {
                    "layer": e.name,
                    "kind": e.kind,
                    "ops": e.ops,
                    "cycles": e.cycles,
                    "pe": e.pe,
                    "simd": e.simd,
                    "weight_bits": e.weight_bits,
                    "per_pe_depth": e.per_pe_depth,
                }
                for e in self.layers
            ],
            "bottleneck": self.bottleneck,
            "throughput_setter": self.throughput_setter,
            "throughput_fps": self.throughput_fps,
            "latency_cycles": self.latency_cycles,
            "latency_s": self.latency_s,
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def pipeline_report(
    spec: NetworkSpec,
    folding: FoldingConfig,
    clock_hz: int = DEFAULT_CLOCK_HZ,
) -> PipelineReport:
    """Cycle, throughput and latency estimates for a folded pipeline.

    The bottleneck is the weighted layer with the most cycles (first such
    layer on ties); the throughput setter is the layer with the most binary
    operations.  Throughput counts one image per bottleneck iteration.
    """
    if clock_hz < 1:
        raise PerfModelError("clock must be positive")
    validate_folding(spec, folding)
    shapes = infer_shapes(spec)
    ops = count_binary_ops(spec, shapes)
    entries = []
    for i, layer in enumerate(spec.layers):
        sh = shapes.shapes[i]
        if layer.weighted:
            pe, simd = folding.lanes(layer.name)
            cycles = layer_cycles(spec, layer, sh, pe, simd)
            mem = weight_memory(spec, layer, sh, pe, simd)
            entries.append(
                LayerReport(
                    name=layer.name,
                    kind=layer.kind,
                    ops=ops[layer.name],
                    cycles=cycles,
                    pe=pe,
                    simd=simd,
                    weight_bits=mem["total_bits"],
                    per_pe_depth=mem["per_pe_depth"],
                )
            )
        else:
            entries.append(
                LayerReport(
                    name=layer.name, kind=layer.kind, ops=0, cycles=0,
                    pe=0, simd=0, weight_bits=0, per_pe_depth=0,
                )
            )
    weighted = [e for e in entries if e.kind != "maxpool"]
    bottleneck = max(weighted, key=lambda e: e.cycles)
    setter = max(weighted, key=lambda e: e.ops)
    return PipelineReport(
        arch_name=spec.arch_name,
        clock_hz=clock_hz,
        layers=tuple(entries),
        bottleneck=bottleneck.name,
        throughput_setter=setter.name,
        max_cycles=bottleneck.cycles,
        latency_cycles=sum(e.cycles for e in entries),
    )


def _next_divisor(total: int, current: int) -> int | None:
    """Smallest divisor of `total` that is at least twice `current`."""
    target = 2 * current
    for d in range(target, total + 1):
        if total % d == 0:
            return d
    return None


def suggest_folding(
    spec: NetworkSpec,
    pe_budget: int,
    simd_budget: int,
) -> FoldingConfig:
    """Greedy folding search: repeatedly widen the slowest layer.

    Starting from 1x1 everywhere, each step looks at the current bottleneck
    and widens whichever of its PE or SIMD lane counts gives the larger cycle
    reduction (ties prefer SIMD, which grows buffer width instead of buffer
    count).  Lane counts move between divisors of their matrix dimension, at
    least doubling each step, so every intermediate folding stays valid.
    Stops when budgets are exhausted or the bottleneck cannot improve.
    Deterministic for fixed inputs.
    """
    by_name = infer_shapes(spec).by_name(spec)
    weighted = list(spec.weighted_layers)
    n = len(weighted)
    if pe_budget < n or simd_budget < n:
        raise PerfModelError(
            f"budgets must cover at least 1 lane per weighted layer ({n})"
        )
    dims = {w.name: matrix_dims(spec, w, by_name[w.name]) for w in weighted}
    pe = {w.name: 1 for w in weighted}
    simd = {w.name: 1 for w in weighted}
    pe_left = pe_budget - n
    simd_left = simd_budget - n

    def cycles(name: str) -> int:
        wmat, co, nvec = dims[name]
        return math.ceil(co / pe[name]) * math.ceil(wmat / simd[name]) * nvec

    while True:
        order = sorted(weighted, key=lambda w: (-cycles(w.name), spec.layers.index(w)))
        name = order[0].name
        wmat, co, _ = dims[name]
        now = cycles(name)

        next_pe = _next_divisor(co, pe[name])
        next_simd = _next_divisor(wmat, simd[name])
        candidates = []
        if next_simd is not None and next_simd - simd[name] <= simd_left:
            old = simd[name]
            simd[name] = next_simd
            gain = now - cycles(name)
            simd[name] = old
            if gain > 0:
                candidates.append(("simd", next_simd, gain))
        if next_pe is not None and next_pe - pe[name] <= pe_left:
            old = pe[name]
            pe[name] = next_pe
            gain = now - cycles(name)
            pe[name] = old
            if gain > 0:
                candidates.append(("pe", next_pe, gain))
        if not candidates:
            return FoldingConfig(pe=dict(pe), simd=dict(simd))
        # Larger gain wins; SIMD wins ties because candidates lists it first.
        kind, value, _ = max(candidates, key=lambda c: c[2])
        if kind == "simd":
            simd_left -= value - simd[name]
            simd[name] = value
        else:
            pe_left -= value - pe[name]
            pe[name] = value
