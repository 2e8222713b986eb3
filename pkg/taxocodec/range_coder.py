"""
range_coder.py
Byte-wise range coder with 16-bit probability precision
=======================================================

Carry-propagating encoder (33-bit ``low`` plus a cached byte and a count of
pending 0xFF bytes) and its mirror decoder. The range stays in [2^24, 2^32)
and is split with full 48-bit products, so the whole state fits in 64 bits.
A segment costs at most 32 bits over the ideal code length plus under 0.4%
for the per-symbol floor of the split. All arithmetic inside the coder is on
Python integers, so output is identical on every platform.

Symbols are alphabet indices in ``[0, K)``; each position is coded under its
own cumulative table of length ``K + 1`` running from 0 to 2^16.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import DecodeError, ShapeMismatchError

logger = logging.getLogger(__name__)

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


# ============================================================================
# CDF TABLES
# ============================================================================

def _repair_row(counts: np.ndarray) -> np.ndarray:
    """Fix an over-full row or zero counts by borrowing from the largest counts."""
    counts = counts.copy()
    while counts.sum() > TOTAL:
        counts[int(np.argmax(counts))] -= 1
    for index in np.flatnonzero(counts == 0):
        counts[index] = 1
        counts[int(np.argmax(counts))] -= 1
    return counts


def build_cdfs(pmfs: np.ndarray) -> np.ndarray:
    """
    Fixed-point cumulative tables for a batch of PMFs (one per row).

    Counts are floor(p * 2^16); the remaining deficit goes one count at a
    time to the largest fractional remainders (ties by index). Every symbol
    ends up with a count of at least 1.
    """
    pmfs = np.atleast_2d(np.asarray(pmfs, dtype=np.float64))
    sums = pmfs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"pmf row {bad} sums to {sums[bad]!r}, expected 1")
    if np.any(pmfs < 0):
        raise ValueError("pmf entries must be non-negative")

    scaled = pmfs * TOTAL
    counts = np.floor(scaled).astype(np.int64)
    remainders = scaled - counts
    deficit = TOTAL - counts.sum(axis=1)
    ranks = np.argsort(-remainders, axis=1, kind="stable")
    bonus = (np.arange(pmfs.shape[1])[None, :] < np.maximum(deficit, 0)[:, None]).astype(np.int64)
    np.put_along_axis(counts, ranks, np.take_along_axis(counts, ranks, axis=1) + bonus, axis=1)

    for row in np.flatnonzero((deficit < 0) | np.any(counts == 0, axis=1)):
        counts[row] = _repair_row(counts[row])

    cdfs = np.zeros((pmfs.shape[0], pmfs.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cdfs[:, 1:])
    return cdfs


def build_cdf(pmf: Sequence[float], alphabet_size: int = None) -> np.ndarray:
    pmf = np.asarray(pmf, dtype=np.float64).reshape(-1)
    if alphabet_size is not None and pmf.size != alphabet_size:
        raise ShapeMismatchError(f"pmf has {pmf.size} entries for an alphabet of {alphabet_size}")
    return build_cdfs(pmf[None, :])[0]


def ideal_bits(indices: Sequence[int], cdfs: np.ndarray) -> float:
    """Sum of -log2(count / 2^16) over the coded symbols."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    cdfs = _per_symbol(cdfs, indices.size)
    rows = np.arange(indices.size)
    counts = cdfs[rows, indices + 1] - cdfs[rows, indices]
    return float(-np.log2(counts / TOTAL).sum())


def _per_symbol(cdfs: np.ndarray, count: int) -> np.ndarray:
    cdfs = np.asarray(cdfs, dtype=np.int64)
    if cdfs.ndim == 1:
        cdfs = np.broadcast_to(cdfs, (count, cdfs.size))
    if cdfs.shape[0] != count:
        raise ShapeMismatchError(f"{cdfs.shape[0]} tables for {count} symbols")
    return cdfs


# ============================================================================
# CODER
# ============================================================================

@dataclass(frozen=True)
class CodedSegment:
    data: bytes
    symbol_count: int

    @property
    def bits(self) -> int:
        return 8 * len(self.data)


def _split(range_: int, start: int, end: int) -> Tuple[int, int]:
    """
    Sub-interval ``[lo, hi)`` of ``[0, range_)`` for cumulative counts
    ``[start, end)``. Products are taken in full (48 bits) before the shift, so
    the symbols tile the range exactly and no range is lost to rounding.
    """
    return (range_ * start) >> PRECISION, (range_ * end) >> PRECISION


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if (self.low & MASK32) < 0xFF000000 or (self.low >> 32):
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int) -> None:
        lo, hi = _split(self.range, start, start + size)
        self.low += lo
        self.range = hi - lo
        while self.range < TOP:
            self.range = (self.range << 8) & MASK32
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # The first emitted byte is always the zero initial cache.
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < 4:
            raise DecodeError(f"coded segment too short: {len(data)} bytes")
        self.data = data
        self.pos = 4
        self.range = MASK32
        self.code = int.from_bytes(data[:4], "big")

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("coded segment truncated")
        byte = self.data[self.pos]
        self.pos += 1
        return byte

    def decode(self, cdf: np.ndarray) -> int:
        if self.code >= self.range:
            raise DecodeError("corrupt coded segment: code outside range")
        # Largest cumulative count whose scaled start does not pass the code.
        target = (((self.code + 1) << PRECISION) - 1) // self.range
        symbol = int(np.searchsorted(cdf, target, side="right")) - 1
        lo, hi = _split(self.range, int(cdf[symbol]), int(cdf[symbol + 1]))
        self.code -= lo
        self.range = hi - lo
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range = (self.range << 8) & MASK32
        return symbol

    def check_finished(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes after the last symbol")
        if self.code != 0:
            raise DecodeError("coded segment did not terminate cleanly")


def encode(indices: Union[Sequence[int], np.ndarray], cdfs: np.ndarray) -> CodedSegment:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    cdfs = _per_symbol(cdfs, indices.size)
    if indices.size and (indices.min() < 0 or indices.max() >= cdfs.shape[1] - 1):
        raise ShapeMismatchError(f"symbol index outside [0, {cdfs.shape[1] - 1})")
    encoder = RangeEncoder()
    starts = cdfs[np.arange(indices.size), indices].tolist()
    ends = cdfs[np.arange(indices.size), indices + 1].tolist()
    for start, end in zip(starts, ends):
        if end <= start:
            raise ShapeMismatchError("cannot code a symbol with zero count")
        encoder.encode(start, end - start)
    data = encoder.finish()
    logger.debug("range-coded %d symbols into %d bytes", indices.size, len(data))
    return CodedSegment(data, int(indices.size))


def decode(segment: CodedSegment, cdfs: np.ndarray) -> np.ndarray:
    cdfs = _per_symbol(cdfs, segment.symbol_count)
    decoder = RangeDecoder(segment.data)
    out = np.empty(segment.symbol_count, dtype=np.int64)
    for i in range(segment.symbol_count):
        out[i] = decoder.decode(cdfs[i])
    decoder.check_finished()
    return out
