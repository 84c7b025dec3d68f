"""Seeded random streams: SplitMix64 with Box-Muller normal deviates.

The generator is pinned to one concrete algorithm so that a fixed seed
reproduces identical sample bytes on every run. SplitMix64 advances its
state by a fixed odd constant and mixes it, which means output ``i`` is a
pure function of ``seed + (i+1)*GOLDEN`` -- the whole stream vectorizes
over numpy uint64 without changing a single output bit relative to the
scalar loop.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV53 = 2.0**-53


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic 64-bit stream; spawn() forks an independent child."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def spawn(self) -> "SplitMix64":
        """Fork a child stream seeded by the next output of this one."""
        return SplitMix64(self.next_u64())

    def raw_block(self, n: int) -> np.ndarray:
        """Next n outputs as uint64, identical to n next_u64() calls."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self._state) + idx * np.uint64(_GOLDEN)
        self._state = (self._state + n * _GOLDEN) & _MASK64
        return _mix_array(states)

    def uniforms(self, n: int) -> np.ndarray:
        """n float64 deviates uniform on [0, 1)."""
        return (self.raw_block(n) >> np.uint64(11)).astype(np.float64) * _INV53

    def normals(self, n: int) -> np.ndarray:
        """n float64 standard-normal deviates via Box-Muller.

        Deviates are produced in pairs from consecutive uniforms; each call
        starts a fresh pair so no state is carried between calls beyond the
        u64 counter. The radial uniform lives on (0, 1] so log() is finite.
        """
        if n == 0:
            return np.empty(0, dtype=np.float64)
        pairs = (n + 1) // 2
        raw = self.raw_block(2 * pairs) >> np.uint64(11)
        u1 = (raw[0::2].astype(np.float64) + 1.0) * _INV53  # (0, 1]
        u2 = raw[1::2].astype(np.float64) * _INV53  # [0, 1)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def integers_below(self, bound: int, n: int) -> np.ndarray:
        """n integers in [0, bound) by modulo reduction.

        The modulo bias is ~bound/2**64 and irrelevant here; what matters
        is that the draw is deterministic and cheap.
        """
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.raw_block(n) % np.uint64(bound)).astype(np.int64)

    def shuffle_indices(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        draws = self.raw_block(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
