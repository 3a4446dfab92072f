"""Counter-based Gaussian noise keyed by (seed, stream, level, sample, time, coordinate).

Every normal draw is a pure function of its key, so a path's noise does not
depend on how samples are batched or split across workers, and coarse and
fine chains that ask for the same fine-grid time get the same numbers.
Bits come from chained SplitMix64 finalisers; normals from the inverse CDF.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# time tags outside the fine-grid index range
TERMINAL_TAG = 1 << 40
TRUNCATION_TAG = (1 << 40) + 1


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class KeyedNormal:
    """Standard normal draws addressed by ``(sample, tag, coordinate)``.

    Args:
        seed: run seed (any nonnegative integer, reduced mod 2**64).
        stream: independent stream id, e.g. one per estimator component.
        level: level index; pairs at level ``l`` and single paths at level
            ``l`` share a key so their fine noise coincides.
    """

    def __init__(self, seed: int, stream: int = 0, level: int = 0):
        self.seed, self.stream, self.level = int(seed), int(stream), int(level)
        k = _mix_int(self.seed + _GOLDEN)
        k = _mix_int(k + (self.stream + 1) * _GOLDEN)
        k = _mix_int(k + (self.level + 1) * _GOLDEN)
        self._key = np.uint64(k)

    def sample_hash(self, samples) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.uint64).reshape(-1, 1)
        with np.errstate(over="ignore"):
            return _mix(self._key + samples * np.uint64(_GOLDEN))

    def normal(self, samples, tag: int, dim: int, hashed=None) -> np.ndarray:
        """Return a ``(len(samples), dim)`` array of N(0, 1) draws.

        ``hashed`` may carry a precomputed ``sample_hash(samples)``.
        """
        h = self.sample_hash(samples) if hashed is None else hashed
        with np.errstate(over="ignore"):
            h = _mix(h + np.uint64((int(tag) * _GOLDEN) & _MASK))
            coords = np.arange(1, dim + 1, dtype=np.uint64).reshape(1, -1)
            h = _mix(h + coords * np.uint64(_GOLDEN))
        u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
        return ndtri(u)


class PathNoise:
    """Noise source for a batch of sample indices on one keyed stream."""

    def __init__(self, key: KeyedNormal, samples, dim: int):
        self.key = key
        self.samples = np.asarray(samples, dtype=np.int64)
        self.dim = int(dim)
        self._hashed = key.sample_hash(self.samples)

    def __len__(self):
        return self.samples.size

    def at(self, tag: int) -> np.ndarray:
        return self.key.normal(self.samples, tag, self.dim, hashed=self._hashed)

    @classmethod
    def make(cls, seed: int, stream: int, level: int, samples, dim: int) -> "PathNoise":
        return cls(KeyedNormal(seed, stream, level), samples, dim)
