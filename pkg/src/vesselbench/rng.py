"""Keyed, counter-based random number generation.

Every stochastic choice in this package (synthetic data, parameter init,
batch sampling, dropout masks) is drawn from a stateless keyed generator, so
results are reproducible bit-for-bit across runs, checkpoint/resume
boundaries and worker counts.  The generator is part of the reproducibility
contract of the on-disk artifacts, so the algorithm is pinned here:

* Raw output ``i`` of a stream with 64-bit key ``K`` is
  ``mix64(K + (i + 1) * 0x9E3779B97F4A7C15)`` (all arithmetic mod 2**64),
  where ``mix64`` is the SplitMix64 finalizer (Steele et al., the mixer used
  by Java's SplittableRandom):
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
  z *= 0x94D049BB133111EB; z ^= z >> 31``.
* A stream key is derived from a tuple of parts by folding:
  ``K = mix64(K0 ^ mix64(part_0)) ...`` with ``K0 = 0x5851F42D4C957F2D``;
  string parts are first hashed with 64-bit FNV-1a over their UTF-8 bytes.
* Uniform doubles in [0, 1) are ``(raw >> 11) * 2**-53``.
* Normals come from Box-Muller on consecutive uniform pairs
  ``(u0, u1)``: ``r = sqrt(-2 ln(1 - u0))``, ``z = r cos(2 pi u1)`` and
  ``r sin(2 pi u1)``.
* ``integers(n, bound)`` is ``floor(uniform * bound)`` (bias < bound/2**53,
  irrelevant at the bounds used here).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_KEY0 = 0x5851F42D4C957F2D
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def _mix64_int(z: int) -> int:
    z &= _U64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _U64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _U64
    z ^= z >> 31
    return z


def _fnv1a(s: str) -> int:
    h = _FNV_OFFSET
    for byte in s.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def stream_key(*parts: int | str) -> int:
    """Fold stream-identifying parts into a 64-bit key."""
    key = _KEY0
    for part in parts:
        p = _fnv1a(part) if isinstance(part, str) else int(part) & _U64
        key = _mix64_int(key ^ _mix64_int(p))
    return key


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class Stream:
    """Sequential view over one keyed counter stream."""

    def __init__(self, *parts: int | str):
        self.key = np.uint64(stream_key(*parts))
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64_vec(self.key + idx * _GOLDEN)

    def uniform(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        shape_t = (shape,) if isinstance(shape, int) else shape
        n = int(np.prod(shape_t)) if shape_t else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if shape_t == ():
            return float(u[0])
        return u.reshape(shape_t)

    def normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        shape_t = (shape,) if isinstance(shape, int) else shape
        n = int(np.prod(shape_t)) if shape_t else 1
        m = (n + 1) // 2
        u = (self.raw(2 * m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u0, u1 = u[:m], u[m:]
        r = np.sqrt(-2.0 * np.log1p(-u0))
        theta = 2.0 * np.pi * u1
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if shape_t == ():
            return float(z[0])
        return z.reshape(shape_t)

    def integers(self, n: int, bound: int) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return np.minimum((u * bound).astype(np.int64), bound - 1)

    def sample(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n) by partial Fisher-Yates."""
        if k > n:
            raise ValueError(f"cannot sample {k} from {n}")
        pool = np.arange(n)
        u = self.uniform(k) if k else np.empty(0)
        for i in range(k):
            j = i + min(int(u[i] * (n - i)), n - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
