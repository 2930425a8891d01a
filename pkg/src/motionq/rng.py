"""splitmix64 random stream with Box-Muller normals.

Every draw is defined bit-for-bit by the seed, so datasets and initial
weights are reproducible across machines and implementations.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic splitmix64 generator.

    Draw ``i`` (1-based) of a stream seeded with ``s`` is
    ``mix(s + i * 0x9E3779B97F4A7C15 mod 2**64)``.  Uniforms take the top 53
    bits, normals pair consecutive uniforms ``(u1, u2)`` through Box-Muller
    as ``sqrt(-2 ln(1 - u1)) * (cos 2*pi*u2, sin 2*pi*u2)``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _mix(z)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` floats in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:n].reshape(shape) * std

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.uniform(1)[0] * bound)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by ``tag``; does not advance ``self``."""
        with np.errstate(over="ignore"):
            child = _mix(np.array([(self.state ^ (int(tag) * _GAMMA)) & _MASK], dtype=np.uint64))
        return Rng(int(child[0]))
