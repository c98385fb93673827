"""Bit-packed sign matrices and exact popcount matrix multiplication.

A sign matrix stores one bit per element, 64 elements per machine word,
row-major. A set bit encodes +1 and a cleared bit encodes -1, so the dot
product of two packed rows reduces to XNOR + popcount over their words.
The packed product is exact integer arithmetic; ``naive_gemm`` provides the
independent unpacked oracle used by the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

WORD_BITS = 64

_FULL_WORD = np.uint64(0xFFFFFFFFFFFFFFFF)

# Cap on the m*n*W intermediate of the vectorized kernel (in words).
_KERNEL_CHUNK_WORDS = 1 << 23


class BitMatrix:
    """A 2-D +/-1 matrix packed 64 signs per uint64 word, row-major.

    Bit ``c % 64`` of word ``c // 64`` in row ``r`` holds the sign of
    element ``(r, c)``; a set bit means +1. Pad bits past ``cols`` in the
    last word of each row are always zero, so they never contribute to a
    popcount. Instances are immutable once constructed.
    """

    __slots__ = ("rows", "cols", "words_per_row", "data")

    def __init__(self, rows: int, cols: int, data: np.ndarray):
        rows, cols = int(rows), int(cols)
        words = (cols + WORD_BITS - 1) // WORD_BITS
        if data.dtype != np.uint64 or data.shape != (rows, words):
            raise ShapeError(
                f"packed data must be uint64 with shape ({rows}, {words}), "
                f"got {data.dtype} {data.shape}"
            )
        self.rows = rows
        self.cols = cols
        self.words_per_row = words
        self.data = data

    def unpack(self, dtype=np.int8) -> np.ndarray:
        """Expand to a dense +/-1 matrix of the requested dtype."""
        u8 = np.ascontiguousarray(self.data).view(np.uint8)
        bits = np.unpackbits(u8, axis=1, bitorder="little")[:, : self.cols]
        return (2 * bits.astype(np.int8) - 1).astype(dtype, copy=False)

    def transpose(self) -> "BitMatrix":
        """Repack as the cols x rows matrix. Costs an unpack/repack."""
        return pack_signs(self.unpack().T)  # sign(+/-1) is the identity

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BitMatrix)
            and self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"BitMatrix({self.rows}x{self.cols})"


def pack_mask(mask: np.ndarray) -> BitMatrix:
    """Pack a boolean matrix one bit per element (True = set). Pads with zeros."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"pack_mask expects a 2-D array, got shape {mask.shape}")
    rows, cols = mask.shape
    words = (cols + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros((rows, words * WORD_BITS), dtype=bool)
    padded[:, :cols] = mask.astype(bool)
    packed = np.packbits(padded, axis=1, bitorder="little")
    return BitMatrix(rows, cols, np.ascontiguousarray(packed).view(np.uint64))


def pack_signs(x: np.ndarray) -> BitMatrix:
    """Pack the signs of a 2-D real matrix, with sign(0) = +1.

    Bit (r, c) is set iff x[r, c] >= 0. Pad bits are zeroed.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"pack_signs expects a 2-D array, got shape {x.shape}")
    return pack_mask(x >= 0)


def _pad_mask(cols: int) -> np.ndarray:
    words = (cols + WORD_BITS - 1) // WORD_BITS
    mask = np.full(words, _FULL_WORD, dtype=np.uint64)
    rem = int(cols) % WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def binary_gemm(a: BitMatrix, b: BitMatrix, b_transposed: bool = False) -> np.ndarray:
    """Exact +/-1 matrix product via XNOR + popcount.

    ``out[i, j] = 2 * popcount(XNOR(a_row_i, b_col_j)) - k`` which equals the
    integer dot product of the +/-1 rows. ``b`` is a k x n matrix; pass
    ``b_transposed=True`` when it is already packed as n x k rows, otherwise
    it is transposed internally so both operands stream row-major.

    Returns an int64 matrix with entries in [-k, k] and the parity of k.
    """
    bt = b if b_transposed else b.transpose()
    if a.cols != bt.cols:
        raise ShapeError(
            f"inner dimensions differ: a is {a.rows}x{a.cols}, "
            f"b is {bt.cols}x{bt.rows}"
        )
    k = a.cols
    mask = _pad_mask(k)
    m, n, words = a.rows, bt.rows, a.words_per_row

    out = np.empty((m, n), dtype=np.int64)
    step = max(1, _KERNEL_CHUNK_WORDS // max(1, n * words))
    for lo in range(0, m, step):
        hi = min(lo + step, m)
        # XNOR sets pad bits (0 vs 0); the mask removes them before counting.
        xnor = ~(a.data[lo:hi, None, :] ^ bt.data[None, :, :]) & mask
        agree = np.bitwise_count(xnor).sum(axis=2, dtype=np.int64)
        out[lo:hi] = 2 * agree - k
    return out


def naive_gemm(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """Oracle: unpack both operands to +/-1 integers and multiply directly."""
    return a.unpack(np.int64) @ b.unpack(np.int64)


def gate_gemm(gates: BitMatrix, b: BitMatrix, b_transposed: bool = False) -> np.ndarray:
    """Product of a 0/1 gate matrix with a +/-1 sign matrix, via AND + popcount.

    For a gate row g and sign column v, sum(g * v) counts the selected +1
    bits against the selected -1 bits: 2 * popcount(g AND v) - popcount(g).
    Gate pad bits are zero, so no masking is needed.
    """
    bt = b if b_transposed else b.transpose()
    if gates.cols != bt.cols:
        raise ShapeError(
            f"inner dimensions differ: gates are {gates.rows}x{gates.cols}, "
            f"signs are {bt.cols}x{bt.rows}"
        )
    m, n, words = gates.rows, bt.rows, gates.words_per_row
    selected = np.bitwise_count(gates.data).sum(axis=1, dtype=np.int64)
    out = np.empty((m, n), dtype=np.int64)
    step = max(1, _KERNEL_CHUNK_WORDS // max(1, n * words))
    for lo in range(0, m, step):
        hi = min(lo + step, m)
        both = gates.data[lo:hi, None, :] & bt.data[None, :, :]
        pos = np.bitwise_count(both).sum(axis=2, dtype=np.int64)
        out[lo:hi] = 2 * pos - selected[lo:hi, None]
    return out


def naive_gate_gemm(gates: BitMatrix, b: BitMatrix) -> np.ndarray:
    """Oracle for gate_gemm: dense 0/1 matrix times dense +/-1 matrix."""
    g01 = (gates.unpack(np.int64) + 1) // 2
    return g01 @ b.unpack(np.int64)
