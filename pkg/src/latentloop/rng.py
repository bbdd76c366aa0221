"""Deterministic random numbers built on the splitmix64 state update.

Every random draw in the package flows from one of these generators so that
runs are reproducible byte-for-byte from a single 64-bit seed.  Substreams
for distinct purposes are derived by folding an FNV-1a hash of a purpose
label into the parent seed; the label set is documented at each call site.
"""
from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


class SplitMix64:
    """splitmix64 generator: one 64-bit word of state, fixed-point-free mixing."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_below(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"next_below needs n >= 1, got {n}")
        return self.next_u64() % n

    def normal(self) -> float:
        """One standard normal draw (Box-Muller, two uniforms per call)."""
        u1 = (self.next_u64() >> 11) * 2.0 ** -53
        u2 = (self.next_u64() >> 11) * 2.0 ** -53
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, shape, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = 1
        for s in shape:
            n *= s
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal() * std
        return out.reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]


def substream(seed: int, purpose: str) -> SplitMix64:
    """Independent generator for `purpose`, derived from `seed`."""
    child = SplitMix64((seed ^ fnv1a64(purpose.encode("utf-8"))) & _MASK)
    child.next_u64()  # one warm-up step decorrelates near-equal seeds
    return child
