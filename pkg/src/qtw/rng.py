"""Counter-based SplitMix64 streams.

Every random quantity in the workbench comes from a 64-bit stream seeded by
``mix64(base_seed, index)``. SplitMix64's state after ``k`` draws is just
``seed + k * GOLDEN``, so any block of a stream can be produced with
vectorised numpy arithmetic and the result does not depend on how work is
split between processes.

The mixing function, published here so other tools can reproduce streams::

    mix64(base, i) = finalize(base + (i + 1) * GOLDEN  mod 2**64)
    finalize(z):   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
                   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                   return z ^ (z >> 31)

Uniforms are ``((x >> 11) + 0.5) * 2**-53`` (never exactly 0 or 1) and
Gaussians come from Box-Muller on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _finalize_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64(base_seed: int, index: int) -> int:
    """Derive the seed of sub-stream ``index`` from ``base_seed``."""
    return _finalize_int((int(base_seed) + (int(index) + 1) * GOLDEN) & MASK64)


def _finalize_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """A SplitMix64 generator with bulk draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            out = _finalize_array(z)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        x = self.next_u64(n)
        return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def uniform_range(self, lo: float, hi: float, n: int) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """Integers uniform on the closed range ``[lo, hi]``."""
        u = self.uniform(n)
        return lo + np.minimum(np.floor(u * (hi - lo + 1)), hi - lo).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = rad * np.cos(ang)
        out[1::2] = rad * np.sin(ang)
        return out[:n]

    def spawn(self, index: int) -> "SplitMix64":
        return SplitMix64(mix64(self.state, index))
