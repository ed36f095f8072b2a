"""Deterministic counter-based random streams.

Every random draw in the package is a pure function of (seed, stream tag,
counter), so sub-streams are reproducible independently of execution order
and of each other. Values come from a 64-bit splitmix-style finalizer;
Gaussians use Box-Muller on consecutive uniform pairs. Cross-language or
cross-platform bit-identity is not promised, only within-platform
reproducibility.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_TWO53 = float(1 << 53)


def _finalize(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


def _fnv1a(tag: str) -> int:
    h = _FNV_OFFSET
    for byte in tag.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def stream_key(seed: int, tag: str, index: int = 0) -> int:
    """Mix (seed, purpose tag, index) into one 64-bit stream key."""
    base = np.array([seed & _MASK64], dtype=np.uint64)
    mixed = _finalize(base)[0]
    raw = (int(mixed) ^ _fnv1a(tag)) + (index & _MASK64) * 0x9E3779B97F4A7C15
    return int(_finalize(np.array([raw & _MASK64], dtype=np.uint64))[0])


class RandomStream:
    """One independent draw sequence; value i is finalize(key + (i+1)*golden)."""

    def __init__(self, key: int):
        self._key = np.uint64(key & _MASK64)
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _finalize(self._key + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) / _TWO53

    def normal(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so log never sees zero
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) / _TWO53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count].reshape(shape)

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """n ints uniform over the inclusive range [low, high]."""
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = high - low + 1
        return low + np.minimum((self.uniform(n) * span).astype(np.int64), span - 1)


def substream(seed: int, tag: str, index: int = 0) -> RandomStream:
    """Named sub-stream of the run-level seed."""
    return RandomStream(stream_key(seed, tag, index))
