"""Reference entropy coder over integer CDF tables.

The coder consumes tables with 16-bit probability precision (cumulative
counts ending exactly at 2**16) and produces a prefix-free byte payload
whose length stays within a few bytes of the ideal codelength.  Encoding
and decoding are exact inverses for any valid table, which is what the
codec round-trip tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

PRECISION = 16
TOTAL = 1 << PRECISION

_STATE_BITS = 32
_MASK = (1 << _STATE_BITS) - 1
_TOP = 1 << (_STATE_BITS - 1)
_SECOND = _TOP >> 1


class InvalidTableError(ValueError):
    pass


class OutOfAlphabetError(ValueError):
    pass


class CorruptPayloadError(ValueError):
    pass


def _check_cum(cum: np.ndarray) -> None:
    if cum.ndim != 1 or len(cum) < 2:
        raise InvalidTableError("cumulative table needs at least one symbol")
    if cum[0] != 0 or cum[-1] != TOTAL:
        raise InvalidTableError(f"cumulative counts must run from 0 to {TOTAL}")
    if np.any(np.diff(cum.astype(np.int64)) <= 0):
        raise InvalidTableError("cumulative counts must be strictly increasing")


@dataclass(frozen=True)
class CdfTable:
    """Integer CDF over a contiguous symbol alphabet.

    ``cum`` has ``alphabet_size + 1`` entries with ``cum[0] == 0`` and
    ``cum[-1] == 2**16``; ``offset`` is the symbol value mapped to index 0.
    """

    cum: np.ndarray
    offset: int = 0

    def __post_init__(self):
        cum = np.ascontiguousarray(self.cum, dtype=np.uint32)
        _check_cum(cum)
        object.__setattr__(self, "cum", cum)

    @property
    def alphabet_size(self) -> int:
        return len(self.cum) - 1

    def symbol_bits(self, value: int) -> float:
        idx = value - self.offset
        count = int(self.cum[idx + 1]) - int(self.cum[idx])
        return -np.log2(count / TOTAL)


def counts_from_pmf(pmf: np.ndarray) -> np.ndarray:
    """Quantize probability rows to integer counts summing to 2**16.

    Every bin keeps at least one count so any symbol stays decodable; the
    rounding deficit is folded into the largest bin. Accepts a single pmf
    or a 2-D batch of rows and returns cumulative rows (``A + 1`` wide).
    """
    p = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    if p.shape[1] < 1 or np.any(~np.isfinite(p)) or np.any(p < 0):
        raise InvalidTableError("pmf must be finite and non-negative")
    n, a = p.shape
    if a > TOTAL // 2:
        raise InvalidTableError("alphabet too large for 16-bit precision")
    norm = p.sum(axis=1, keepdims=True)
    if np.any(norm <= 0):
        raise InvalidTableError("pmf must have positive mass")
    p = p / norm
    counts = np.floor(p * (TOTAL - a)).astype(np.int64) + 1
    deficit = TOTAL - counts.sum(axis=1)
    top = np.argmax(counts, axis=1)
    counts[np.arange(n), top] += deficit
    cum = np.zeros((n, a + 1), dtype=np.uint32)
    cum[:, 1:] = np.cumsum(counts, axis=1)
    if pmf.ndim == 1:
        return cum[0]
    return cum


@njit(cache=True)
def _put_bit(out, st, b):
    st[0] = (st[0] << 1) | b
    st[1] += 1
    if st[1] == 8:
        out[st[2]] = st[0]
        st[2] += 1
        st[0] = 0
        st[1] = 0


@njit(cache=True)
def _encode_kernel(indices, rows, row_idx, out):
    low = 0
    high = _MASK
    underflow = 0
    st = np.zeros(3, dtype=np.int64)  # current byte, bits filled, bytes written
    for i in range(indices.shape[0]):
        cum = rows[row_idx[i]]
        s = indices[i]
        total = np.int64(cum[cum.shape[0] - 1])
        symlow = np.int64(cum[s])
        symhigh = np.int64(cum[s + 1])
        span = high - low + 1
        newhigh = low + symhigh * span // total - 1
        newlow = low + symlow * span // total
        low = newlow
        high = newhigh
        while ((low ^ high) & _TOP) == 0:
            bit = low >> (_STATE_BITS - 1)
            _put_bit(out, st, bit)
            for _ in range(underflow):
                _put_bit(out, st, bit ^ 1)
            underflow = 0
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while (low & ~high & _SECOND) != 0:
            underflow += 1
            low = (low << 1) & (_MASK >> 1)
            high = ((high << 1) & (_MASK >> 1)) | _TOP | 1
    _put_bit(out, st, 1)
    while st[1] != 0:
        _put_bit(out, st, 0)
    return st[2]


@njit(cache=True)
def _decode_kernel(payload, rows, row_idx, count, out):
    low = 0
    high = _MASK
    code = 0
    bytepos = 0
    bitsleft = 0
    curbyte = 0
    for _ in range(_STATE_BITS):
        if bitsleft == 0:
            if bytepos < payload.shape[0]:
                curbyte = payload[bytepos]
                bytepos += 1
            else:
                curbyte = 0
            bitsleft = 8
        code = (code << 1) | ((curbyte >> (bitsleft - 1)) & 1)
        bitsleft -= 1
    for i in range(count):
        cum = rows[row_idx[i]]
        alphabet = cum.shape[0] - 1
        total = np.int64(cum[alphabet])
        span = high - low + 1
        value = ((code - low + 1) * total - 1) // span
        lo = 0
        hi = alphabet
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if np.int64(cum[mid]) > value:
                hi = mid
            else:
                lo = mid
        s = lo
        out[i] = s
        symlow = np.int64(cum[s])
        symhigh = np.int64(cum[s + 1])
        newhigh = low + symhigh * span // total - 1
        newlow = low + symlow * span // total
        low = newlow
        high = newhigh
        while ((low ^ high) & _TOP) == 0:
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
            if bitsleft == 0:
                if bytepos < payload.shape[0]:
                    curbyte = payload[bytepos]
                    bytepos += 1
                else:
                    curbyte = 0
                bitsleft = 8
            code = ((code << 1) & _MASK) | ((curbyte >> (bitsleft - 1)) & 1)
            bitsleft -= 1
        while (low & ~high & _SECOND) != 0:
            low = (low << 1) & (_MASK >> 1)
            high = ((high << 1) & (_MASK >> 1)) | _TOP | 1
            if bitsleft == 0:
                if bytepos < payload.shape[0]:
                    curbyte = payload[bytepos]
                    bytepos += 1
                else:
                    curbyte = 0
                bitsleft = 8
            code = (code & _TOP) | ((code << 1) & (_MASK >> 1)) | ((curbyte >> (bitsleft - 1)) & 1)
            bitsleft -= 1


def _as_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.ascontiguousarray(rows, dtype=np.uint32)
    if rows.ndim != 2:
        raise InvalidTableError("table rows must be 2-D")
    for r in rows:
        _check_cum(r)
    return rows


def encode_indexed(indices: np.ndarray, rows: np.ndarray, row_idx: np.ndarray) -> bytes:
    """Encode alphabet indices, one CDF row per symbol via ``row_idx``."""
    rows = _as_rows(rows)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    row_idx = np.ascontiguousarray(row_idx, dtype=np.int64)
    if indices.shape != row_idx.shape or indices.ndim != 1:
        raise ValueError("indices and row_idx must be matching 1-D arrays")
    if len(indices) and (row_idx.min() < 0 or row_idx.max() >= len(rows)):
        raise InvalidTableError("row index out of range")
    alphabet = rows.shape[1] - 1
    if len(indices) and (indices.min() < 0 or indices.max() >= alphabet):
        raise OutOfAlphabetError("symbol outside the table alphabet")
    out = np.zeros(3 * len(indices) + 64, dtype=np.uint8)
    nbytes = _encode_kernel(indices, rows, row_idx, out)
    return bytes(out[:nbytes])


def decode_indexed(payload: bytes, rows: np.ndarray, row_idx: np.ndarray, count: int) -> np.ndarray:
    """Inverse of :func:`encode_indexed`; returns alphabet indices."""
    rows = _as_rows(rows)
    row_idx = np.ascontiguousarray(row_idx, dtype=np.int64)
    if count < 0 or row_idx.shape != (count,):
        raise ValueError("row_idx must provide one row per decoded symbol")
    if count and (row_idx.min() < 0 or row_idx.max() >= len(rows)):
        raise InvalidTableError("row index out of range")
    buf = np.frombuffer(payload, dtype=np.uint8)
    out = np.zeros(count, dtype=np.int64)
    _decode_kernel(buf, rows, row_idx, count, out)
    return out


def encode_symbols(symbols, table: CdfTable) -> bytes:
    """Encode integer symbol values under a single table."""
    symbols = np.asarray(symbols, dtype=np.int64)
    indices = symbols - table.offset
    if len(indices) and (indices.min() < 0 or indices.max() >= table.alphabet_size):
        raise OutOfAlphabetError("symbol outside the table alphabet")
    rows = table.cum[None, :]
    return encode_indexed(indices, rows, np.zeros(len(indices), dtype=np.int64))


def decode_symbols(payload: bytes, table: CdfTable, count: int) -> np.ndarray:
    """Decode ``count`` symbol values encoded under a single table."""
    rows = table.cum[None, :]
    idx = decode_indexed(payload, rows, np.zeros(count, dtype=np.int64), count)
    return idx + table.offset


def warm_up() -> None:
    """Trigger JIT compilation so timed runs pay no compile cost."""
    cum = counts_from_pmf(np.array([0.5, 0.5]))
    t = CdfTable(cum)
    decode_symbols(encode_symbols([0, 1, 0], t), t, 3)
