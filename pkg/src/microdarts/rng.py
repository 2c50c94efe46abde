"""SplitMix64 pseudo-random generator.

Every stochastic choice in the package (weight init, synthetic data, shuffles)
draws from this generator so that a run is a pure function of its seed.  The
mixing function is the standard SplitMix64 finalizer (Steele, Lea & Flood,
2014); blocks of outputs are produced with vectorized uint64 arithmetic, which
gives exactly the same stream as calling :meth:`SplitMix64.next_u64` in a loop.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class SplitMix64:
    """Counter-style 64-bit generator with labelled sub-streams."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        return int(self.uint64s(1)[0])

    def uint64s(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        out = _mix(np.uint64(self.state) + steps)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.uint64s(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return (std * z[:n]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # uint64 keys collide with probability ~n^2/2^64; the stable sort keeps
        # the result deterministic even then.
        return np.argsort(self.uint64s(n), kind="stable")

    def fork(self, label: str) -> "SplitMix64":
        """Independent stream derived from the current seed and a label.

        Forking does not advance this generator.
        """
        key = np.array([self.state ^ _fnv1a(label)], dtype=np.uint64)
        return SplitMix64(int(_mix(key)[0]))
