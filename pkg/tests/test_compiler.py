"""Threshold folding and the compiled-model container."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnkit import compiler, data, netspec, train
from bnnkit.compiler import (
    DOMAIN_INTEGER,
    DOMAIN_POPCOUNT,
    ThresholdParams,
    apply_thresholds,
    fold_batchnorm_to_integer_threshold,
    fold_batchnorm_to_threshold,
)
from bnnkit.errors import (
    BadMagicError,
    CompileWarning,
    HeaderBoundsError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from bnnkit.train import BatchNormParams

GUARD_BAND = 1e-6


def bn_from(gamma, beta, mean, var, eps=1e-5):
    mk = lambda v: np.asarray(v, dtype=np.float32).reshape(-1)
    return BatchNormParams(
        gamma=mk(gamma), beta=mk(beta), running_mean=mk(mean), running_var=mk(var),
        eps=eps,
    )


def float_decision(bn, d):
    """Reference: sign of the batch-norm output at accumulator value d."""
    g = bn.gamma.astype(np.float64)
    b = bn.beta.astype(np.float64)
    m = bn.running_mean.astype(np.float64)
    s = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    return g * (d - m) / s + b >= 0


def boundary_distance(bn, d):
    g = bn.gamma.astype(np.float64)
    b = bn.beta.astype(np.float64)
    m = bn.running_mean.astype(np.float64)
    s = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    return np.abs(g * (d - m) / s + b)


@given(
    st.integers(min_value=1, max_value=512),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=150, deadline=None)
def test_fold_matches_float_sign_over_full_sweep(fan_in, seed):
    rng = np.random.default_rng(seed)
    c = 4
    bn = bn_from(
        rng.uniform(-2, 2, c),
        rng.normal(0, 2, c),
        rng.normal(0, fan_in / 4, c),
        rng.uniform(1e-3, fan_in, c),
    )
    params = fold_batchnorm_to_threshold(bn, fan_in)
    p = np.arange(fan_in + 1)
    d = 2 * p - fan_in
    for ch in range(c):
        if bn.gamma[ch] == 0:
            continue
        ch_bn = bn_from(bn.gamma[ch], bn.beta[ch], bn.running_mean[ch], bn.running_var[ch])
        want = float_decision(ch_bn, d.astype(np.float64))
        got = apply_thresholds(
            ThresholdParams(
                params.thresholds[ch : ch + 1], params.flips[ch : ch + 1], fan_in
            ),
            p[:, None],
        )[:, 0]
        close = boundary_distance(ch_bn, d.astype(np.float64)) < GUARD_BAND
        match = (got.astype(bool) == want) | close
        assert match.all()


def test_fold_zero_gamma_constant_channel_with_warning():
    bn = bn_from([0.0, 0.0], [0.5, -0.5], [0.0, 0.0], [1.0, 1.0])
    with pytest.warns(CompileWarning):
        params = fold_batchnorm_to_threshold(bn, 10)
    p = np.arange(11)[:, None].repeat(2, axis=1)
    bits = apply_thresholds(params, p)
    assert bits[:, 0].all()  # beta >= 0: always on
    assert not bits[:, 1].any()  # beta < 0: always off
    assert not params.flips.any()


def test_fold_saturated_channels_normalized():
    fan_in = 8
    # Enormous mean pushes thresholds past both ends; flipped channels too.
    bn = bn_from(
        [1.0, 1.0, -1.0, -1.0],
        [0.0, 0.0, 0.0, 0.0],
        [1e9, -1e9, 1e9, -1e9],
        [1.0, 1.0, 1.0, 1.0],
    )
    params = fold_batchnorm_to_threshold(bn, fan_in)
    assert params.thresholds.min() >= 0
    assert params.thresholds.max() <= fan_in + 1
    p = np.arange(fan_in + 1)[:, None].repeat(4, axis=1)
    bits = apply_thresholds(params, p)
    assert not bits[:, 0].any()  # gamma>0, huge mean: never fires
    assert bits[:, 1].all()  # gamma>0, huge negative mean: always fires
    assert bits[:, 2].all()  # gamma<0, huge mean: always fires
    assert not bits[:, 3].any()
    # Saturated flipped channels are rewritten as unflipped ones.
    assert not params.flips[2] and not params.flips[3]


def test_fold_tie_at_zero_fires():
    # BN output exactly zero must produce +1 (the >= 0 convention).
    fan_in = 4
    # gamma=1, beta=0, mean=0, var=1-eps => BN(d) = d; threshold at p=2 (d=0).
    bn = bn_from([1.0], [0.0], [0.0], [1.0 - 1e-5])
    params = fold_batchnorm_to_threshold(bn, fan_in)
    bits = apply_thresholds(params, np.array([[2]]))
    assert bits[0, 0] == 1


def test_integer_domain_fold_matches_float():
    rng = np.random.default_rng(11)
    fan_in = 27
    c = 8
    bn = bn_from(
        rng.uniform(-1.5, 1.5, c),
        rng.normal(0, 1, c),
        rng.normal(0, 3, c),
        rng.uniform(1e-2, 9, c),
    )
    params = fold_batchnorm_to_integer_threshold(bn, fan_in)
    assert params.domain == DOMAIN_INTEGER
    lo, hi = params.bounds()
    assert lo == -128 * fan_in and hi == 127 * fan_in + 1
    q = rng.integers(-128 * fan_in, 127 * fan_in + 1, size=(4000, 1))
    for ch in range(c):
        if bn.gamma[ch] == 0:
            continue
        ch_bn = bn_from(bn.gamma[ch], bn.beta[ch], bn.running_mean[ch], bn.running_var[ch])
        x = q[:, 0].astype(np.float64) / 128.0
        want = float_decision(ch_bn, x)
        got = apply_thresholds(
            ThresholdParams(
                params.thresholds[ch : ch + 1],
                params.flips[ch : ch + 1],
                fan_in,
                DOMAIN_INTEGER,
            ),
            q,
        )[:, 0]
        close = boundary_distance(ch_bn, x) < GUARD_BAND
        assert ((got.astype(bool) == want) | close).all()


def test_threshold_params_bounds_enforced():
    with pytest.raises(ValueError):
        ThresholdParams(np.array([12], dtype=np.int32), np.array([False]), 10)
    with pytest.raises(ValueError):
        ThresholdParams(np.array([-1], dtype=np.int32), np.array([False]), 10)


@pytest.fixture(scope="module")
def quick_model():
    ds = data.synth_quadrant_dataset(8, seed=21)
    model = train.init_model(netspec.builtin_spec("u-cnv"), seed=21)
    state = train.AdamState(lr=1e-3)
    for _ in range(3):
        train.train_step(model, ds.images, ds.labels, state)
    return model


def test_compile_packs_weight_signs(quick_model):
    compiled = compiler.compile_model(quick_model)
    from bnnkit.bitcore import unpack_bit_rows

    trained = dict(quick_model.weighted())
    by_name = {l.name: l for l in quick_model.spec.layers}
    for layer in compiled.layers:
        if layer.weight_words is None:
            continue
        w = trained[by_name[layer.name]].weights
        if layer.kind == netspec.CONV:
            rows = np.transpose(w, (3, 0, 1, 2)).reshape(layer.c_out, -1)
        else:
            rows = w.T
        bits = unpack_bit_rows(layer.weight_words, layer.fan_in)
        np.testing.assert_array_equal(bits, (rows >= 0).astype(np.uint8))


def test_compile_first_layer_is_integer_domain(quick_model):
    compiled = compiler.compile_model(quick_model)
    first = compiled.layers[0]
    assert first.integer_input
    assert first.thresholds.domain == DOMAIN_INTEGER
    rest = [l for l in compiled.layers[1:] if l.thresholds is not None]
    assert all(l.thresholds.domain == DOMAIN_POPCOUNT for l in rest)
    assert compiled.layers[-1].thresholds is None  # score layer stays integer


def test_model_roundtrip_and_stable_bytes(quick_model, tmp_path):
    compiled = compiler.compile_model(quick_model)
    p = tmp_path / "model.bin"
    compiler.emit_model(compiled, p)
    back = compiler.load_model(p)
    assert back == compiled
    blob1 = p.read_bytes()
    blob2 = compiler.model_to_bytes(back)
    assert blob1 == blob2


def test_load_error_taxonomy(quick_model):
    blob = compiler.model_to_bytes(compiler.compile_model(quick_model))

    with pytest.raises(BadMagicError):
        compiler.model_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        compiler.model_from_bytes(blob[:4] + struct.pack("<I", 999) + blob[8:])
    with pytest.raises(TruncatedFileError):
        compiler.model_from_bytes(blob[:-1])
    with pytest.raises(TruncatedFileError):
        compiler.model_from_bytes(blob[:20])
    with pytest.raises(TruncatedFileError):
        compiler.model_from_bytes(blob + b"\x00")


def test_load_rejects_implausible_header_without_allocating():
    # A header claiming ~10^9 layers or channels must fail fast on bounds,
    # before any payload-sized allocation happens.
    name = b"n-cnv"
    head = b"BCOP" + struct.pack("<IH", 1, len(name)) + name
    huge_layers = head + struct.pack("<IIIII", 4, 32, 3, 128, 1_000_000_000)
    with pytest.raises(HeaderBoundsError):
        compiler.model_from_bytes(huge_layers)

    lname = b"conv1_1"
    layer_rec = struct.pack("<H", len(lname)) + lname + struct.pack(
        "<BBIIIIIIIII", 0, 1, 3, 1, 3, 1_000_000_000, 32, 32, 30, 30, 27
    )
    huge_channels = head + struct.pack("<IIIII", 4, 32, 3, 128, 1) + layer_rec
    with pytest.raises(HeaderBoundsError):
        compiler.model_from_bytes(huge_channels)


def test_compile_requires_matching_arch(quick_model):
    other = netspec.builtin_spec("cnv")
    with pytest.raises(ValueError):
        compiler.compile_model(quick_model, other)
