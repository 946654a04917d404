"""Bit-packed {-1,+1} tensors and the XNOR/popcount kernels used by inference.

Encoding is fixed so that model files are bit-exact across machines:
64-bit words, LSB-first (bit ``i`` of word ``j`` holds element ``64*j + i``),
bit 1 encodes +1 and bit 0 encodes -1. Padding bits past ``bit_len`` are
kept at zero by the constructors, but every kernel masks the tail word
itself, so corrupted padding can never leak into a dot product.

All operations are pure functions over effectively immutable inputs and are
safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORD_BITS = 64

_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


def n_words(bit_len: int) -> int:
    """Number of 64-bit words needed to hold ``bit_len`` bits."""
    return (bit_len + WORD_BITS - 1) // WORD_BITS


def tail_word_mask(bit_len: int) -> np.uint64:
    """Mask of valid bits in the final word of a ``bit_len``-bit vector."""
    rem = bit_len % WORD_BITS
    if rem == 0:
        return _ALL_ONES
    return np.uint64((1 << rem) - 1)


@dataclass(frozen=True)
class BitTensor:
    """A packed vector of {-1,+1} values.

    ``dims`` records the semantic axes (e.g. ``(k, k, c)`` for a weight row);
    the payload itself is always the flattened, channels-last vector.
    """

    dims: tuple[int, ...]
    bit_len: int
    words: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = 1
        for d in self.dims:
            expected *= d
        if expected != self.bit_len:
            raise ValueError(
                f"dims {self.dims} imply {expected} elements, got bit_len {self.bit_len}"
            )
        if self.words.dtype != np.uint64 or self.words.ndim != 1:
            raise ValueError("words must be a 1-D uint64 array")
        if len(self.words) != n_words(self.bit_len):
            raise ValueError(
                f"expected {n_words(self.bit_len)} words for {self.bit_len} bits, "
                f"got {len(self.words)}"
            )

    def __len__(self) -> int:
        return self.bit_len


def pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, bit_len) 0/1 array into (rows, n_words) uint64, LSB-first."""
    if bits.ndim == 1:
        bits = bits[None, :]
    rows, bit_len = bits.shape
    if bit_len == 0:
        return np.zeros((rows, 0), dtype=np.uint64)
    packed = np.packbits(bits.astype(np.uint8), axis=1, bitorder="little")
    pad = n_words(bit_len) * 8 - packed.shape[1]
    if pad:
        packed = np.pad(packed, ((0, 0), (0, pad)))
    packed = np.ascontiguousarray(packed)  # the u8->u64 view needs C order
    return packed.view("<u8").astype(np.uint64, copy=False)


def unpack_bit_rows(words: np.ndarray, bit_len: int) -> np.ndarray:
    """Inverse of :func:`pack_bit_rows`; returns a (rows, bit_len) uint8 0/1 array."""
    if words.ndim == 1:
        words = words[None, :]
    rows = words.shape[0]
    if bit_len == 0:
        return np.zeros((rows, 0), dtype=np.uint8)
    as_bytes = words.astype("<u8").view(np.uint8).reshape(rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
    return bits[:, :bit_len]


def pack(values, dims: tuple[int, ...] | None = None) -> BitTensor:
    """Pack a {-1,+1} integer vector into a :class:`BitTensor`.

    Raises ``ValueError`` for any element that is not exactly -1 or +1.
    """
    v = np.asarray(values)
    if dims is None:
        dims = tuple(v.shape)
    flat = v.reshape(-1)
    if flat.size and not np.all(np.abs(flat) == 1):
        bad = flat[np.abs(flat) != 1][0]
        raise ValueError(f"pack expects only -1/+1 elements, found {bad!r}")
    bits = (flat > 0).astype(np.uint8)
    words = pack_bit_rows(bits)[0]
    return BitTensor(dims=dims, bit_len=flat.size, words=words)


def unpack(t: BitTensor) -> np.ndarray:
    """Unpack to a {-1,+1} int8 vector of length ``t.bit_len``."""
    bits = unpack_bit_rows(t.words, t.bit_len)[0]
    return (bits.astype(np.int8) * 2 - 1).astype(np.int8)


def binarize(x: np.ndarray) -> BitTensor:
    """Binarize reals with the sign rule: bit = 1 iff the value is >= 0.

    Zero maps to +1; this is the same boundary the hardware threshold
    comparison uses.
    """
    x = np.asarray(x)
    bits = (x.reshape(-1) >= 0).astype(np.uint8)
    words = pack_bit_rows(bits)[0]
    return BitTensor(dims=tuple(x.shape), bit_len=x.size, words=words)


def valid_mask_words(bit_len: int) -> np.ndarray:
    """Per-word mask with ones on valid bit positions, zeros on padding."""
    words = np.full(n_words(bit_len), _ALL_ONES, dtype=np.uint64)
    if len(words):
        words[-1] = tail_word_mask(bit_len)
    return words


def xnor_popcount_dot(a: BitTensor, b: BitTensor) -> int:
    """Signed {-1,+1} dot product, computed as ``2*popcount(XNOR) - F``.

    The XNOR result is masked against the valid-bit mask internally, so the
    result is independent of whatever the callers left in the padding bits.
    """
    if a.bit_len != b.bit_len:
        raise ValueError(f"fan-in mismatch: {a.bit_len} vs {b.bit_len}")
    f = a.bit_len
    if f == 0:
        return 0
    agree = ~(a.words ^ b.words) & valid_mask_words(f)
    p = int(np.bitwise_count(agree).sum())
    return 2 * p - f


def complement(t: BitTensor) -> BitTensor:
    """Flip every valid bit (negate the encoded {-1,+1} vector)."""
    words = (~t.words) & valid_mask_words(t.bit_len)
    return BitTensor(dims=t.dims, bit_len=t.bit_len, words=words)


def popcount_rows(words: np.ndarray, bit_len: int) -> np.ndarray:
    """Popcount of each packed row after masking padding; returns int64 counts."""
    if words.ndim == 1:
        words = words[None, :]
    masked = words & valid_mask_words(bit_len)[None, :]
    return np.bitwise_count(masked).sum(axis=1, dtype=np.int64)
