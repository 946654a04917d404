"""Desk-scale training of the built-in networks.

Latent real-valued weights are kept in [-1, 1] and binarized on every
forward pass; activations pass through batch-norm then sign, with the
clipped straight-through estimator carrying gradients backward. The first
layer consumes 8-bit pixels mapped onto the [-1, 1) grid instead of
binarized pixels (binarizing RGB input would destroy the signal).

Defaults the underlying method leaves open (loss, optimizer, schedule) are
cross-entropy, Adam at lr 1e-3, batch 64; see README for the rationale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (
    BadMagicError,
    ModelFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .netspec import CONV, FC, MAXPOOL, NetworkSpec, builtin_spec, infer_shapes
from .nn import ste_backward  # re-exported: the STE is part of this module's surface

__all__ = [
    "BatchNormParams",
    "LayerParams",
    "TrainedModel",
    "TrainConfig",
    "ForwardRecord",
    "init_model",
    "forward_train",
    "backward",
    "ste_backward",
    "predict",
    "AdamState",
    "adam_step",
    "train_epoch",
    "train_model",
    "save_checkpoint",
    "load_checkpoint",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

CHECKPOINT_MAGIC = b"BNCK"
CHECKPOINT_VERSION = 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM


@dataclass
class LayerParams:
    """Parameters for one spec layer; pools carry neither weights nor BN."""

    weights: np.ndarray | None = None
    bn: BatchNormParams | None = None


@dataclass
class TrainedModel:
    spec: NetworkSpec
    layers: list[LayerParams]
    seed: int = 0
    epochs_trained: int = 0

    def weighted(self):
        return [
            (l, p) for l, p in zip(self.spec.layers, self.layers) if l.weighted
        ]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def init_model(spec: NetworkSpec, seed: int = 0) -> TrainedModel:
    """Fresh model with Glorot-uniform latent weights and identity batch norm."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(spec)
    layers: list[LayerParams] = []
    for layer, shape in zip(spec.layers, shapes.shapes):
        if not layer.weighted:
            layers.append(LayerParams())
            continue
        if layer.kind == CONV:
            fan_in = layer.k * layer.k * layer.c_in
            w_shape = (layer.k, layer.k, layer.c_in, layer.c_out)
        else:
            fan_in = shape.fan_in
            w_shape = (fan_in, layer.c_out)
        limit = np.sqrt(6.0 / (fan_in + layer.c_out))
        w = rng.uniform(-limit, limit, size=w_shape).astype(np.float32)
        bn = None
        if layer.has_bn_sign:
            c = layer.c_out
            bn = BatchNormParams(
                gamma=np.ones(c, dtype=np.float32),
                beta=np.zeros(c, dtype=np.float32),
                running_mean=np.zeros(c, dtype=np.float32),
                running_var=np.ones(c, dtype=np.float32),
            )
        layers.append(LayerParams(weights=np.clip(w, -1.0, 1.0), bn=bn))
    return TrainedModel(spec=spec, layers=layers, seed=seed)


@dataclass
class ForwardRecord:
    logits: np.ndarray
    preacts: list[np.ndarray | None]  # conv/fc accumulator outputs per spec layer
    outputs: list[np.ndarray]  # each layer block's output (post BN/sign or pool)
    caches: list = field(repr=False, default_factory=list)


def forward_train(
    model: TrainedModel,
    batch: np.ndarray,
    training: bool = True,
    update_running: bool | None = None,
    surrogate: bool = False,
    dtype=np.float32,
) -> ForwardRecord:
    """Run the training-form network, recording per-layer pre-activations.

    ``batch`` is float pixel data shaped (N, 32, 32, 3) in [-1, 1) (see
    :func:`bnnkit.nn.quantize_pixels`). ``training`` selects batch statistics
    for the BN layers; otherwise running statistics are used. ``surrogate``
    replaces every sign with hard-tanh (differentiable twin, used by the
    gradient tests).
    """
    if update_running is None:
        update_running = training
    x = np.asarray(batch, dtype=dtype)
    if x.ndim != 4 or x.shape[1:] != (
        model.spec.input_size,
        model.spec.input_size,
        model.spec.input_channels,
    ):
        raise ValueError(
            f"batch must be (N, {model.spec.input_size}, {model.spec.input_size}, "
            f"{model.spec.input_channels}), got {x.shape}"
        )

    h = x
    preacts: list[np.ndarray | None] = []
    outputs: list[np.ndarray] = []
    caches: list = []
    logits = None
    for layer, params in zip(model.spec.layers, model.layers):
        if layer.kind == MAXPOOL:
            h, cache = nn.maxpool2x2_forward(h)
            preacts.append(None)
            outputs.append(h)
            caches.append(("pool", cache))
            continue

        if layer.kind == CONV:
            acc, op_cache = nn.conv_forward(h, params.weights, surrogate=surrogate)
        else:
            acc, op_cache = nn.fc_forward(h, params.weights, surrogate=surrogate)
        preacts.append(acc)

        if layer.has_bn_sign:
            bn = params.bn
            if training:
                flat = acc.reshape(-1, acc.shape[-1])
                mean, var = nn.batch_stats(flat)
                if update_running:
                    m = bn.momentum
                    bn.running_mean = (
                        m * bn.running_mean + (1.0 - m) * mean
                    ).astype(np.float32)
                    bn.running_var = (
                        m * bn.running_var + (1.0 - m) * var
                    ).astype(np.float32)
            else:
                mean = bn.running_mean.astype(dtype)
                var = bn.running_var.astype(dtype)
            normed, bn_cache = nn.batchnorm_forward(
                acc,
                bn.gamma.astype(dtype),
                bn.beta.astype(dtype),
                mean.astype(dtype),
                var.astype(dtype),
                bn.eps,
                batch_mode=training,
            )
            h, sign_cache = nn.sign_act_forward(normed, surrogate=surrogate)
            caches.append((layer.kind, op_cache, bn_cache, sign_cache))
        else:
            logits = acc
            h = acc
            caches.append((layer.kind, op_cache, None, None))
        outputs.append(h)

    return ForwardRecord(logits=logits, preacts=preacts, outputs=outputs, caches=caches)


@dataclass
class LayerGrads:
    weights: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None


def backward(
    model: TrainedModel,
    record: ForwardRecord,
    dlogits: np.ndarray,
    stop_layer: int | None = None,
) -> tuple[list[LayerGrads], np.ndarray | None]:
    """Backpropagate from the logits.

    Returns per-layer parameter gradients aligned with ``model.layers``.
    When ``stop_layer`` is given, propagation halts once the gradient at that
    layer's *output* is known and that gradient is returned as the second
    element (earlier layers keep ``None`` gradients).
    """
    grads = [LayerGrads() for _ in model.layers]
    dh = dlogits
    for i in range(len(model.spec.layers) - 1, -1, -1):
        if stop_layer is not None and i == stop_layer:
            return grads, dh
        layer = model.spec.layers[i]
        cache = record.caches[i]
        if layer.kind == MAXPOOL:
            dh = nn.maxpool2x2_backward(dh, cache[1])
            continue
        _, op_cache, bn_cache, sign_cache = cache
        if sign_cache is not None:
            dh = nn.sign_act_backward(dh, sign_cache)
        if bn_cache is not None:
            dh, dgamma, dbeta = nn.batchnorm_backward(dh, bn_cache)
            grads[i].gamma = dgamma
            grads[i].beta = dbeta
        if layer.kind == CONV:
            dh, dw = nn.conv_backward(dh, op_cache)
        else:
            dh, dw = nn.fc_backward(dh, op_cache)
        grads[i].weights = dw
    return grads, (dh if stop_layer is None else None)


def predict(model: TrainedModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode classification (running statistics, float64 accumulation).

    ``images`` is uint8 (N, 32, 32, 3); returns (class ids, logits).
    """
    x = nn.quantize_pixels(images).astype(np.float64)
    rec = forward_train(model, x, training=False, dtype=np.float64)
    return rec.logits.argmax(axis=1), rec.logits


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    slots: dict = field(default_factory=dict)

    def _slot(self, key: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if key not in self.slots:
            self.slots[key] = (
                np.zeros(shape, dtype=np.float32),
                np.zeros(shape, dtype=np.float32),
            )
        return self.slots[key]


def _adam_update(state: AdamState, key: str, param: np.ndarray, grad: np.ndarray):
    m, v = state._slot(key, param.shape)
    g = grad.astype(np.float32, copy=False)
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    mhat = m / (1.0 - state.beta1**state.t)
    vhat = v / (1.0 - state.beta2**state.t)
    param -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def adam_step(model: TrainedModel, grads: list[LayerGrads], state: AdamState):
    """One Adam update; latent weights are re-clipped to [-1, 1] afterwards."""
    state.t += 1
    for i, (params, g) in enumerate(zip(model.layers, grads)):
        if g.weights is not None:
            _adam_update(state, f"w{i}", params.weights, g.weights)
            np.clip(params.weights, -1.0, 1.0, out=params.weights)
        if g.gamma is not None:
            _adam_update(state, f"g{i}", params.bn.gamma, g.gamma)
        if g.beta is not None:
            _adam_update(state, f"b{i}", params.bn.beta, g.beta)


def train_step(
    model: TrainedModel,
    images: np.ndarray,
    labels: np.ndarray,
    state: AdamState,
) -> tuple[float, float]:
    """Single optimizer step on one batch; returns (loss, batch accuracy)."""
    x = nn.quantize_pixels(images)
    record = forward_train(model, x, training=True)
    loss, dlogits = nn.softmax_cross_entropy(record.logits, labels)
    grads, _ = backward(model, record, dlogits)
    adam_step(model, grads, state)
    acc = float((record.logits.argmax(axis=1) == labels).mean())
    return loss, acc


def train_epoch(
    model: TrainedModel,
    dataset,
    config: TrainConfig,
    state: AdamState,
    rng: np.random.Generator,
    epoch_index: int = 0,
) -> dict:
    """One pass over ``dataset`` (anything with ``images`` and ``labels``)."""
    images, labels = dataset.images, dataset.labels
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = rng.permutation(n)
    losses = []
    correct = 0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        batch = images[idx]
        if config.augment:
            from .data import augment

            batch = np.stack(
                [
                    augment(img, seed=_record_seed(config.seed, epoch_index, int(i)))
                    for img, i in zip(batch, idx)
                ]
            )
        loss, acc = train_step(model, batch, labels[idx], state)
        losses.append(loss)
        correct += int(round(acc * len(idx)))
    model.epochs_trained += 1
    return {"loss": float(np.mean(losses)), "accuracy": correct / n}


def _record_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def train_model(model: TrainedModel, dataset, config: TrainConfig) -> list[dict]:
    """Run ``config.epochs`` epochs; the whole random stream hangs off the seed."""
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        history.append(train_epoch(model, dataset, config, state, rng, epoch))
    return history


# ---------------------------------------------------------------------------
# checkpoints (format: docs/formats.md)


def _write_f32(sink, arr: np.ndarray):
    sink.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(buf: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * 4
    if offset + nbytes > len(buf):
        raise TruncatedFileError("checkpoint truncated")
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype="<f4").reshape(shape)
    return arr.astype(np.float32).copy(), offset + nbytes


def save_checkpoint(model: TrainedModel, path):
    """Write the latent model as a versioned binary checkpoint."""
    arch = model.spec.arch_name.encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IH", CHECKPOINT_VERSION, len(arch)))
        f.write(arch)
        f.write(struct.pack("<QI", model.seed, model.epochs_trained))
        for layer, params in model.weighted():
            _write_f32(f, params.weights)
            f.write(struct.pack("<B", 1 if params.bn is not None else 0))
            if params.bn is not None:
                bn = params.bn
                for arr in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                    _write_f32(f, arr)
                f.write(struct.pack("<dd", bn.eps, bn.momentum))


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as f:
        blob = f.read()
    buf = memoryview(blob)
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError("not a training checkpoint (bad magic)")
    try:
        version, arch_len = struct.unpack_from("<IH", buf, 4)
        off = 10
        if off + arch_len > len(buf):
            raise TruncatedFileError("checkpoint truncated in header")
        arch = bytes(buf[off : off + arch_len]).decode()
        off += arch_len
        seed, epochs = struct.unpack_from("<QI", buf, off)
        off += 12
    except struct.error as e:
        raise TruncatedFileError(f"checkpoint truncated: {e}") from e
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")

    try:
        spec = builtin_spec(arch)
    except ValueError as e:
        raise ModelFormatError(str(e)) from e
    shapes = infer_shapes(spec)
    model = init_model(spec, seed=0)
    model.seed = seed
    model.epochs_trained = epochs
    for layer, shape, params in zip(spec.layers, shapes.shapes, model.layers):
        if not layer.weighted:
            continue
        if layer.kind == CONV:
            w_shape = (layer.k, layer.k, layer.c_in, layer.c_out)
        else:
            w_shape = (shape.fan_in, layer.c_out)
        params.weights, off = _read_f32(buf, off, w_shape)
        if off + 1 > len(buf):
            raise TruncatedFileError("checkpoint truncated")
        (has_bn,) = struct.unpack_from("<B", buf, off)
        off += 1
        if bool(has_bn) != (params.bn is not None):
            raise ModelFormatError(
                f"checkpoint/spec batch-norm mismatch at {layer.name}"
            )
        if has_bn:
            c = layer.c_out
            bn = params.bn
            bn.gamma, off = _read_f32(buf, off, (c,))
            bn.beta, off = _read_f32(buf, off, (c,))
            bn.running_mean, off = _read_f32(buf, off, (c,))
            bn.running_var, off = _read_f32(buf, off, (c,))
            if off + 16 > len(buf):
                raise TruncatedFileError("checkpoint truncated")
            eps, momentum = struct.unpack_from("<dd", buf, off)
            off += 16
            bn.eps, bn.momentum = float(eps), float(momentum)
    if off != len(buf):
        raise ModelFormatError("trailing bytes in checkpoint")
    return model
