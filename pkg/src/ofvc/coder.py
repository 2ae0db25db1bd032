"""Integer range coder over 16-bit quantized cumulative distributions.

The encoder keeps a 32-bit range and a low register with carry propagation;
bytes are emitted most-significant first whenever the range drops below 2^24.
A stream is the renormalization bytes followed by a 4-byte flush, so an empty
symbol sequence encodes to exactly 4 bytes.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DecodeError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 4


@dataclass(frozen=True)
class QuantizedCdf:
    """Cumulative counts ``cum`` over symbols lo..hi; cum[0] = 0, cum[-1] = 65536."""

    lo: int
    cum: tuple[int, ...]

    @property
    def hi(self) -> int:
        return self.lo + len(self.cum) - 2

    def count(self, symbol: int) -> int:
        k = symbol - self.lo
        return self.cum[k + 1] - self.cum[k]

    def bits(self, symbol: int) -> float:
        return PRECISION - math.log2(self.count(symbol))

    @classmethod
    def from_counts(cls, lo: int, counts: Sequence[int]) -> "QuantizedCdf":
        cum = np.concatenate([[0], np.cumsum(counts)])
        if cum[-1] != TOTAL or np.any(np.asarray(counts) < 1):
            raise ConfigurationError("counts must be >= 1 and sum to 65536")
        return cls(int(lo), tuple(int(c) for c in cum))


def laplace_masses(mu: float, scale: float, lo: int, hi: int) -> np.ndarray:
    """Discretized Laplace masses on lo..hi with both tails folded into the ends."""
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5 - mu
    cdf = np.where(edges < 0, 0.5 * np.exp(np.minimum(edges, 0) / scale),
                   1.0 - 0.5 * np.exp(-np.maximum(edges, 0) / scale))
    cdf[0], cdf[-1] = 0.0, 1.0
    return np.diff(cdf)


def quantize_masses(masses: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding to 16-bit counts, one reserved count per symbol."""
    n = masses.size
    if n > TOTAL:
        raise ConfigurationError(f"alphabet of {n} symbols exceeds the 16-bit scale")
    spare = TOTAL - n
    scaled = masses / masses.sum() * spare
    base = np.floor(scaled).astype(np.int64)
    short = spare - int(base.sum())
    if short:
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:short]] += 1
    return base + 1


def build_cdf(mu: float, scale: float, lo: int, hi: int) -> QuantizedCdf:
    if not scale > 0:
        raise ConfigurationError(f"Laplace scale must be positive, got {scale}")
    if hi < lo:
        raise ConfigurationError(f"empty symbol range [{lo}, {hi}]")
    return QuantizedCdf.from_counts(lo, quantize_masses(laplace_masses(mu, scale, lo, hi)))


@lru_cache(maxsize=1 << 16)
def cached_cdf(mu_q: int, log_scale_q: int, lo: int, hi: int, mu_steps: int,
               log_scale_steps: int) -> QuantizedCdf:
    """CDF for snapped distribution parameters; every call site shares the cache."""
    return build_cdf(mu_q / mu_steps, math.exp(log_scale_q / log_scale_steps), lo, hi)


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if (low & _MASK32) < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            byte = self._cache
            while True:
                self._out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self._cache_size -= 1
                if not self._cache_size:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, symbol: int, cdf: QuantizedCdf) -> None:
        k = symbol - cdf.lo
        if not 0 <= k < len(cdf.cum) - 1:
            raise ConfigurationError(f"symbol {symbol} outside [{cdf.lo}, {cdf.hi}]")
        r = self.range >> PRECISION
        self.low += r * cdf.cum[k]
        self.range = r * (cdf.cum[k + 1] - cdf.cum[k])
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES + 1):
            self._shift_low()
        # the first emitted byte is always zero and is implied by the decoder
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("range-coded payload truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, cdf: QuantizedCdf) -> int:
        r = self.range >> PRECISION
        target = self.code // r
        if target >= TOTAL:
            raise DecodeError("corrupt range-coded payload")
        k = bisect_right(cdf.cum, target) - 1
        self.code -= r * cdf.cum[k]
        self.range = r * (cdf.cum[k + 1] - cdf.cum[k])
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & _MASK32
        return cdf.lo + k

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} unread bytes after range-coded payload")


def encode(symbols: Iterable[int], cdfs: Iterable[QuantizedCdf]) -> bytes:
    enc = RangeEncoder()
    for s, cdf in zip(symbols, cdfs, strict=True):
        enc.encode(int(s), cdf)
    return enc.finish()


def decode(data: bytes, cdfs: Iterable[QuantizedCdf]) -> list[int]:
    dec = RangeDecoder(data)
    out = [dec.decode(cdf) for cdf in cdfs]
    dec.finish()
    return out


def ideal_bits(symbols: Iterable[int], cdfs: Iterable[QuantizedCdf]) -> float:
    return sum(cdf.bits(int(s)) for s, cdf in zip(symbols, cdfs))
