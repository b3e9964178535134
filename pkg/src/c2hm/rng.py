"""Seeded, portable random streams.

The generator is SplitMix64 used in counter mode: draw ``i`` (0-based) of a
stream with seed ``s`` is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``
with the standard SplitMix64 finalizer. Because every draw depends only on
``(seed, counter)``, blocks are generated with vectorized uint64 arithmetic
and any other language can reproduce the stream bit for bit.

Uniforms take the top 53 bits: ``u = (x >> 11) * 2**-53`` in ``[0, 1)``.
Normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then
``r sin(2 pi u2)``. Both outputs are consumed; an odd request keeps the
spare for the next call.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit outputs ``start .. start+count-1`` of the stream for ``seed``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + idx * GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


class SeededRng:
    """Counter-based stream with a Box-Muller spare cache."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0
        self._spare: float | None = None

    def raw(self, count: int) -> np.ndarray:
        out = splitmix64_block(self.seed, self.counter, count)
        self.counter += count
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def standard_normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n)
        filled = 0
        if n and self._spare is not None:
            out[0] = self._spare
            self._spare = None
            filled = 1
        need = n - filled
        if need > 0:
            pairs = (need + 1) // 2
            u = self.uniform((pairs, 2))
            r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
            theta = 2.0 * np.pi * u[:, 1]
            z = np.empty(2 * pairs)
            z[0::2] = r * np.cos(theta)
            z[1::2] = r * np.sin(theta)
            out[filled:] = z[:need]
            if 2 * pairs > need:
                self._spare = float(z[-1])
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort on uniforms: ties are impossible in practice and
        # resolved by index order otherwise
        return np.argsort(self.uniform((n,)), kind="stable")

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return (low + np.floor(self.uniform(shape) * (high - low))).astype(np.int64)

    def spawn(self, tag: int) -> "SeededRng":
        """Independent child stream, derived from this seed and an integer tag."""
        child_seed = int(splitmix64_block(self.seed ^ (tag * 0xD1B54A32D192ED03 & _MASK64), 0, 1)[0])
        return SeededRng(child_seed)


def rng_standard_normal(rng: SeededRng, shape) -> np.ndarray:
    return rng.standard_normal(tuple(shape))
