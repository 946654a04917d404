"""Packed bit vectors and the XNOR/popcount dot product."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnkit import bitcore


def random_pm1(rng, n):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=n)


def test_n_words_boundaries():
    assert bitcore.n_words(1) == 1
    assert bitcore.n_words(64) == 1
    assert bitcore.n_words(65) == 2
    assert bitcore.n_words(128) == 2
    assert bitcore.n_words(129) == 3


def test_tail_word_mask():
    assert bitcore.tail_word_mask(64) == np.uint64(0xFFFFFFFFFFFFFFFF)
    assert bitcore.tail_word_mask(1) == np.uint64(1)
    assert bitcore.tail_word_mask(65) == np.uint64(1)
    assert bitcore.tail_word_mask(3) == np.uint64(0b111)


@given(st.integers(min_value=1, max_value=300), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_pack_unpack_roundtrip(n, seed):
    rng = np.random.default_rng(seed)
    values = random_pm1(rng, n)
    t = bitcore.pack(values)
    assert t.bit_len == n
    assert t.words.shape == (bitcore.n_words(n),)
    back = bitcore.unpack(t)
    assert back.dtype == np.int8
    np.testing.assert_array_equal(back, values)


def test_pack_bit_order_lsb_first():
    # Element i lands in bit i of word i // 64.
    values = -np.ones(70, dtype=np.int8)
    values[0] = 1
    values[65] = 1
    t = bitcore.pack(values)
    assert t.words[0] == np.uint64(1)
    assert t.words[1] == np.uint64(1 << 1)


def test_pack_rejects_non_pm1():
    with pytest.raises(ValueError):
        bitcore.pack(np.array([1, 0, -1]))
    with pytest.raises(ValueError):
        bitcore.pack(np.array([2, -1]))


def test_padding_bits_are_zero():
    t = bitcore.pack(np.ones(3, dtype=np.int8))
    assert t.words[0] == np.uint64(0b111)
    mask = bitcore.valid_mask_words(3)
    assert (t.words & ~mask).sum() == 0


def test_binarize_zero_maps_to_plus_one():
    t = bitcore.binarize(np.array([-0.5, 0.0, 0.5, -0.0]))
    np.testing.assert_array_equal(bitcore.unpack(t), [-1, 1, 1, 1])


@given(st.integers(min_value=1, max_value=1024), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=300, deadline=None)
def test_xnor_dot_matches_integer_oracle(n, seed):
    rng = np.random.default_rng(seed)
    a = random_pm1(rng, n)
    b = random_pm1(rng, n)
    got = bitcore.xnor_popcount_dot(bitcore.pack(a), bitcore.pack(b))
    assert got == int(a.astype(np.int32) @ b.astype(np.int32))


def test_xnor_dot_exhaustive_small():
    # Every pair of vectors for lengths 1..8 (and samples up to 16).
    for n in range(1, 9):
        for ai in range(2**n):
            a = np.array([1 if ai >> i & 1 else -1 for i in range(n)], dtype=np.int8)
            ta = bitcore.pack(a)
            for bi in range(2**n):
                b = np.array([1 if bi >> i & 1 else -1 for i in range(n)], dtype=np.int8)
                got = bitcore.xnor_popcount_dot(ta, bitcore.pack(b))
                assert got == int(a.astype(int) @ b.astype(int))


def test_xnor_dot_extremes():
    n = 100
    ones = bitcore.pack(np.ones(n, dtype=np.int8))
    neg = bitcore.complement(ones)
    assert bitcore.xnor_popcount_dot(ones, ones) == n
    assert bitcore.xnor_popcount_dot(ones, neg) == -n
    assert bitcore.xnor_popcount_dot(neg, neg) == n


def test_xnor_dot_parity_invariant():
    # 2p - F always has the parity of F.
    rng = np.random.default_rng(3)
    for n in (7, 64, 65, 130):
        a = bitcore.pack(random_pm1(rng, n))
        b = bitcore.pack(random_pm1(rng, n))
        assert (bitcore.xnor_popcount_dot(a, b) - n) % 2 == 0


def test_xnor_dot_ignores_padding_garbage():
    # Corrupt padding bits by hand; the kernel must mask them out.
    rng = np.random.default_rng(4)
    a = random_pm1(rng, 70)
    b = random_pm1(rng, 70)
    ta, tb = bitcore.pack(a), bitcore.pack(b)
    dirty = ta.words.copy()
    dirty[-1] |= ~bitcore.valid_mask_words(70)[-1]
    td = bitcore.BitTensor.__new__(bitcore.BitTensor)
    object.__setattr__(td, "dims", ta.dims)
    object.__setattr__(td, "bit_len", ta.bit_len)
    object.__setattr__(td, "words", dirty)
    assert bitcore.xnor_popcount_dot(td, tb) == int(a.astype(int) @ b.astype(int))


def test_xnor_dot_length_mismatch_raises():
    a = bitcore.pack(np.ones(4, dtype=np.int8))
    b = bitcore.pack(np.ones(5, dtype=np.int8))
    with pytest.raises(ValueError):
        bitcore.xnor_popcount_dot(a, b)


@given(st.integers(min_value=1, max_value=200), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_complement_negates(n, seed):
    rng = np.random.default_rng(seed)
    v = random_pm1(rng, n)
    t = bitcore.pack(v)
    np.testing.assert_array_equal(bitcore.unpack(bitcore.complement(t)), -v)
    # Complement keeps padding clean.
    mask = bitcore.valid_mask_words(n)
    assert (bitcore.complement(t).words & ~mask).sum() == 0


def test_pack_bit_rows_matrix_roundtrip():
    rng = np.random.default_rng(5)
    bits = rng.integers(0, 2, size=(7, 130)).astype(np.uint8)
    words = bitcore.pack_bit_rows(bits)
    assert words.shape == (7, 3)
    np.testing.assert_array_equal(bitcore.unpack_bit_rows(words, 130), bits)


def test_popcount_rows_masks_padding():
    bits = np.ones((2, 70), dtype=np.uint8)
    words = bitcore.pack_bit_rows(bits)
    np.testing.assert_array_equal(bitcore.popcount_rows(words, 70), [70, 70])


def test_bittensor_validates_word_count():
    with pytest.raises(ValueError):
        bitcore.BitTensor(dims=(70,), bit_len=70, words=np.zeros(1, dtype=np.uint64))
