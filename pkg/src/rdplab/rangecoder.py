"""Integer range coder and quantized CDF tables.

32-bit range coder with byte-wise renormalization and carry propagation,
driven by 16-bit cumulative-count tables. Everything on this path is integer
or fixed-rule double arithmetic so that identical inputs produce identical
bytes across processes and platforms.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from typing import List, Sequence, Tuple

import numpy as np

from .errors import BitstreamError

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

# Fixed framing cost of one coded stream (dummy byte + 4-byte flush).
FLUSH_BYTES = 5


def normal_cdf(x) -> np.ndarray:
    """Standard normal CDF via a fixed rational approximation.

    Zelen & Severo polynomial (five terms, |error| < 7.5e-8), evaluated in
    double precision with a fixed operation order so coding tables are
    reproducible. Do not substitute a math-library erf here.
    """
    x = np.asarray(x, dtype=np.float64)
    t = 1.0 / (1.0 + 0.2316419 * np.abs(x))
    poly = t * (
        0.319381530
        + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429)))
    )
    pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
    upper = 1.0 - pdf * poly
    return np.where(x >= 0.0, upper, 1.0 - upper)


def logistic_cdf(x, loc=0.0, scale=1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    t = (x - loc) / scale
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class CdfTable:
    """Cumulative counts for one symbol alphabet.

    ``cum`` has one entry per bin edge: cum[0] == 0, cum[-1] == 2**16,
    strictly increasing (every symbol is codable). ``offset`` is the
    integer value of the first symbol.
    """

    __slots__ = ("cum", "offset")

    def __init__(self, cum: Sequence[int], offset: int):
        cum = [int(c) for c in cum]
        if len(cum) < 2:
            raise ValueError("cdf table needs at least one symbol")
        if cum[0] != 0 or cum[-1] != CDF_TOTAL:
            raise ValueError("cum must start at 0 and end at 2**16")
        for a, b in zip(cum, cum[1:]):
            if b <= a:
                raise ValueError("cum must be strictly increasing")
        self.cum = cum
        self.offset = int(offset)

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1

    def counts(self) -> List[int]:
        return [b - a for a, b in zip(self.cum, self.cum[1:])]


def quantize_cdf(cdf: np.ndarray) -> np.ndarray:
    """Round a float CDF (last axis) to strictly increasing 16-bit counts.

    Rounding rule: floor(p * 2**16 + 0.5), then a forward pass forces each
    interior value to be at least one above its predecessor and to leave at
    least one count for every remaining bin. Total is exactly 2**16 and
    every bin has width >= 1.
    """
    cdf = np.asarray(cdf, dtype=np.float64)
    c = np.floor(cdf * CDF_TOTAL + 0.5).astype(np.int64)
    n = c.shape[-1] - 1
    c[..., 0] = 0
    c[..., -1] = CDF_TOTAL
    for i in range(1, n):
        lo = c[..., i - 1] + 1
        hi = CDF_TOTAL - (n - i)
        c[..., i] = np.minimum(np.maximum(c[..., i], lo), hi)
    return c


def gaussian_cum_matrix(
    mu: np.ndarray, sigma: np.ndarray, support: Tuple[int, int]
) -> np.ndarray:
    """Quantized Gaussian CDF rows, one per (mu, sigma) pair.

    Tail mass beyond the support is folded into the extreme bins by pinning
    the outer CDF values at 0 and 1.
    """
    s_min, s_max = int(support[0]), int(support[1])
    if s_max < s_min:
        raise ValueError(f"empty support [{s_min}, {s_max}]")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    inner = np.arange(s_min, s_max, dtype=np.float64) + 0.5  # interior edges
    cdf = np.empty((mu.shape[0], s_max - s_min + 2), dtype=np.float64)
    cdf[:, 0] = 0.0
    cdf[:, -1] = 1.0
    cdf[:, 1:-1] = normal_cdf((inner[None, :] - mu) / sigma)
    return quantize_cdf(cdf)


def logistic_cum_matrix(
    loc: np.ndarray, scale: np.ndarray, support: Tuple[int, int]
) -> np.ndarray:
    s_min, s_max = int(support[0]), int(support[1])
    if s_max < s_min:
        raise ValueError(f"empty support [{s_min}, {s_max}]")
    loc = np.asarray(loc, dtype=np.float64).reshape(-1, 1)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    inner = np.arange(s_min, s_max, dtype=np.float64) + 0.5
    cdf = np.empty((loc.shape[0], s_max - s_min + 2), dtype=np.float64)
    cdf[:, 0] = 0.0
    cdf[:, -1] = 1.0
    cdf[:, 1:-1] = logistic_cdf(inner[None, :], loc, scale)
    return quantize_cdf(cdf)


def build_cdf_gaussian(
    mu: float, sigma: float, support: Tuple[int, int]
) -> CdfTable:
    """16-bit coding table for one Gaussian with unit quantization bins."""
    cum = gaussian_cum_matrix(np.array([mu]), np.array([sigma]), support)[0]
    return CdfTable(cum.tolist(), support[0])


def build_cdf_logistic(
    loc: float, scale: float, support: Tuple[int, int]
) -> CdfTable:
    cum = logistic_cum_matrix(np.array([loc]), np.array([scale]), support)[0]
    return CdfTable(cum.tolist(), support[0])


class RangeEncoder:
    """32-bit range encoder, byte renormalization, explicit carry handling."""

    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self) -> None:
        if self._low < 0xFF000000 or self._low > _MASK32:
            carry = self._low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._cache_size - 1):
                self._out.append((0xFF + carry) & 0xFF)
            self._cache = (self._low >> 24) & 0xFF
            self._cache_size = 0
        self._cache_size += 1
        self._low = (self._low << 8) & _MASK32

    def encode(self, cum_lo: int, cum_hi: int, total: int = CDF_TOTAL) -> None:
        r = self._range // total
        self._low += r * cum_lo
        self._range = r * (cum_hi - cum_lo)
        while self._range < _TOP:
            self._range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder; raises BitstreamError on truncated input."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._r = 0
        for _ in range(FLUSH_BYTES):
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise BitstreamError("truncated range-coded stream")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_freq(self, total: int = CDF_TOTAL) -> int:
        self._r = self._range // total
        f = self._code // self._r
        if f >= total:
            raise BitstreamError("corrupted range-coded stream")
        return f

    def decode_update(self, cum_lo: int, cum_hi: int) -> None:
        self._code -= cum_lo * self._r
        self._range = self._r * (cum_hi - cum_lo)
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32
            self._range <<= 8

    @property
    def consumed(self) -> int:
        return self._pos

    def assert_exhausted(self) -> None:
        if self._pos != len(self._data):
            raise BitstreamError(
                f"stream length mismatch: consumed {self._pos} of {len(self._data)} bytes"
            )


def encode_symbols(symbols: Sequence[int], tables: Sequence[CdfTable]) -> bytes:
    """Range-encode one symbol per table; out-of-support symbols are clamped
    to the support edge before encoding."""
    if len(symbols) != len(tables):
        raise ValueError("need exactly one table per symbol")
    enc = RangeEncoder()
    for s, tab in zip(symbols, tables):
        idx = min(max(int(s) - tab.offset, 0), tab.num_symbols - 1)
        enc.encode(tab.cum[idx], tab.cum[idx + 1])
    return enc.finish()


def decode_symbols(
    data: bytes, tables: Sequence[CdfTable], count: int
) -> List[int]:
    """Inverse of encode_symbols; exact on the clamped symbol sequence."""
    if count != len(tables):
        raise ValueError("need exactly one table per symbol")
    if count == 0:
        return []
    dec = RangeDecoder(data)
    out = []
    for tab in tables:
        f = dec.decode_freq()
        idx = bisect_right(tab.cum, f) - 1
        dec.decode_update(tab.cum[idx], tab.cum[idx + 1])
        out.append(idx + tab.offset)
    dec.assert_exhausted()
    return out


def encode_indexed(
    symbols: np.ndarray, cums: np.ndarray, rows: np.ndarray, offset: int
) -> bytes:
    """Fast path: symbols[i] coded with table row rows[i] of ``cums``."""
    cum_list = cums.tolist()
    nsym = cums.shape[-1] - 1
    enc = RangeEncoder()
    for s, r in zip(symbols.tolist(), rows.tolist()):
        idx = min(max(s - offset, 0), nsym - 1)
        row = cum_list[r]
        enc.encode(row[idx], row[idx + 1])
    return enc.finish()


def decode_indexed(
    data: bytes, cums: np.ndarray, rows: np.ndarray, offset: int, count: int
) -> np.ndarray:
    cum_list = cums.tolist()
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    rows_list = rows.tolist()
    for i in range(count):
        row = cum_list[rows_list[i]]
        f = dec.decode_freq()
        idx = bisect_right(row, f) - 1
        dec.decode_update(row[idx], row[idx + 1])
        out[i] = idx + offset
    dec.assert_exhausted()
    return out


def ideal_bits(symbols: Sequence[int], tables: Sequence[CdfTable]) -> float:
    """Information content of the sequence under the quantized tables."""
    total = 0.0
    for s, tab in zip(symbols, tables):
        idx = min(max(int(s) - tab.offset, 0), tab.num_symbols - 1)
        total += -math.log2((tab.cum[idx + 1] - tab.cum[idx]) / CDF_TOTAL)
    return total
