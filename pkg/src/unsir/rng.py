"""SplitMix64 random streams and seed derivation.

Every random draw in the package (weight init, shuffles, subset draws, noise
init, synthetic data) goes through :class:`SplitMix64` so that results depend
only on ``(seed, inputs)`` and not on numpy's global or default generators.

The generator is the standard SplitMix64 sequence::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Because the state advances by a constant, the ``i``-th output is a pure
function of ``seed + (i + 1) * gamma`` and a block of outputs can be produced
with vectorized uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finalizer."""
    return int(_mix(np.array([value & MASK64], dtype=np.uint64))[0])


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Per-stage seed: ``mix64(seed XOR fnv1a64(tag))``.

    Stages seeded this way are reproducible in isolation: re-running only
    the ``"noise/3"`` stage needs nothing but the master seed and the tag.
    """
    return mix64((int(seed) & MASK64) ^ fnv1a64(tag))


class SplitMix64:
    """Counter-style SplitMix64 stream with vectorized block draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._state = self.seed

    @property
    def state(self) -> int:
        return self._state

    def next_u64(self, n: int) -> np.ndarray:
        """The next ``n`` raw 64-bit outputs."""
        if n < 0:
            raise ValueError(f"cannot draw {n} values")
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        states = np.uint64(self._state) + steps
        self._state = (self._state + n * GOLDEN_GAMMA) & MASK64
        return _mix(states)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def uniform_range(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals via the Box-Muller transform.

        Pairs ``(u1, u2)`` are consumed in order; the cosine branch fills even
        slots and the sine branch odd slots. ``u1`` is shifted to (0, 1] so
        the log is always finite.
        """
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def below(self, bounds: np.ndarray) -> np.ndarray:
        """One integer in ``[0, b)`` for each entry of ``bounds``.

        Uses Lemire's multiply-shift on the high 32 bits; the bias is below
        ``b / 2**32`` which is irrelevant at dataset sizes.
        """
        bounds = np.asarray(bounds, dtype=np.uint64)
        if np.any(bounds == 0):
            raise ValueError("bounds must be positive")
        hi = self.next_u64(bounds.size) >> np.uint64(32)
        return ((hi * bounds) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``.

        For ``i = n-1 .. 1`` swap slot ``i`` with ``j ~ U{0..i}``.
        """
        order = np.arange(n, dtype=np.int64)
        if n < 2:
            return order
        js = self.below(np.arange(n, 1, -1, dtype=np.uint64))
        for i, j in zip(range(n - 1, 0, -1), js.tolist()):
            order[i], order[j] = order[j], order[i]
        return order

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, partial Fisher-Yates."""
        if k >= n:
            return self.permutation(n)
        order = np.arange(n, dtype=np.int64)
        js = self.below(np.arange(n, n - k, -1, dtype=np.uint64))
        for i, j in enumerate(js.tolist()):
            j += i
            order[i], order[j] = order[j], order[i]
        return order[:k].copy()
