"""xoshiro256** pseudo-random generator seeded through SplitMix64.

The stream is defined entirely by 64-bit integer arithmetic, so equal seeds
give equal streams on every platform. Bulk draws go through a numba kernel;
:func:`reference_stream` is a plain-Python transcription of the same
algorithm used to cross-check it.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def seed_state(seed: int) -> list[int]:
    x = seed & MASK64
    state = []
    for _ in range(4):
        x, out = splitmix64(x)
        state.append(out)
    return state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def reference_stream(seed: int, n: int) -> list[int]:
    """First ``n`` outputs of the generator, computed with Python integers."""
    s0, s1, s2, s3 = seed_state(seed)
    out = []
    for _ in range(n):
        out.append((_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64)
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    return out


@njit(cache=True)
def _fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    five = np.uint64(5)
    nine = np.uint64(9)
    for i in range(out.shape[0]):
        x = s1 * five
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = x * nine
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


class Rng:
    """Seeded generator with numpy-returning helpers."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._state = np.array(seed_state(self.seed), dtype=np.uint64)

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill(self._state, out)
        return out

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, size=()) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(size)) if size != () else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(size) if size != () else u[0]

    def random(self) -> float:
        return float(self.uniform())

    def normal(self, size, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        """Box-Muller normal draws."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform((m,))  # (0, 1]
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])[:n]
        return (z * std).astype(dtype).reshape(size)

    def integers(self, high: int, size=()) -> np.ndarray:
        """Uniform integers in [0, high) via the multiply-shift of a 53-bit draw."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(size)
        return np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)

    def randint(self, low: int, high: int) -> int:
        """Single integer in [low, high]."""
        return low + int(self.integers(high - low + 1))

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self.uniform(size) < p

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = np.arange(n)
        if n < 2:
            return idx
        draws = self.uniform((n - 1,))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(draws[k] * (i + 1)), i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def choice(self, items: Sequence, size: int | None = None, replace: bool = True):
        items = list(items)
        if size is None:
            return items[int(self.integers(len(items)))]
        if replace:
            return [items[i] for i in self.integers(len(items), (size,))]
        return [items[i] for i in self.permutation(len(items))[:size]]

    def spawn(self) -> "Rng":
        """Independent child generator seeded from the next output."""
        return Rng(self.next_u64())
