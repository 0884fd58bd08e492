"""Deterministic 64-bit pseudo-random generator.

The harness must reproduce bit-identical ground truth regardless of host,
library version, or language of a reimplementation, so it cannot depend on
numpy's generators. This module implements the splitmix64 sequence:

    output(n) = mix64((seed + (n + 1) * 0x9E3779B97F4A7C15) mod 2**64)

    mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
              z ^= z >> 27; z *= 0x94D049BB133111EB
              z ^= z >> 31

Derived values (all documented, all exactly reproducible):
  * uniform in [0, 1):  (output >> 11) * 2**-53
  * uniform in (0, 1]:  ((output >> 11) + 1) * 2**-53
  * standard normal:    Box-Muller on consecutive (open, half-open) pairs
  * integer below n:    min(n - 1, floor(uniform * n))

Because output(n) depends only on (seed, n), any contiguous run of draws
can be produced in one vectorized call.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_TWO_NEG53 = 2.0**-53


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def mix64(value: int) -> int:
    """The splitmix64 finalizer on one integer (mod 2**64).

    Used to spread externally chosen seeds before deriving per-item
    streams: raw seeds s and s+1 differ in one bit, mixed seeds differ
    in about half of them.
    """
    z = value & _MASK
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    z ^= z >> 31
    return z


class SplitMix64:
    """Counter-based splitmix64 stream starting at a 64-bit seed."""

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK
        self._count = 0

    def next_u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        state = np.uint64(self._seed) + idx * np.uint64(_GAMMA)
        return _mix64_array(state)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    def gaussian(self, n: int) -> np.ndarray:
        """``n`` standard normals (Box-Muller, pairs of consecutive draws)."""
        if n < 0:
            raise ValueError("n must be non-negative")
        pairs = (n + 1) // 2
        raw = self.next_u64(2 * pairs)
        # u1 in (0, 1] so log(u1) is finite; u2 in [0, 1).
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_NEG53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n]

    def below(self, bound: int) -> int:
        """One integer in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        u = float(self.uniform(1)[0])
        return min(bound - 1, int(u * bound))

    def sample_without_replacement(self, population: int, k: int) -> list[int]:
        """First ``k`` entries of a Fisher-Yates shuffle of range(population).

        Swap i uses index i + below(population - i); draw order defines the
        sample order, so the result is reproducible from the seed alone.
        """
        if k < 0 or k > population:
            raise ValueError("k must be in [0, population]")
        pool = list(range(population))
        for i in range(k):
            j = i + self.below(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
