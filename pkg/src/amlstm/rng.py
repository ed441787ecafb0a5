"""Deterministic hierarchical random streams.

Every stochastic choice in the package (weight init, data synthesis, batch
shuffling, dropout masks, augmentation shifts) draws from an :class:`Rng`
substream derived purely from a root seed and a path of names.  Substream
values therefore do not depend on how many draws other components made, which
is what makes whole-pipeline reruns byte-identical.
"""

from __future__ import annotations

import zlib

import numpy as np

from .core import ConfigError

_MAX_SEED = 2**64


def _resolve_key(key) -> int:
    """Map a child key to a non-negative integer spawn component."""
    if isinstance(key, bool):
        raise ConfigError("rng child keys must be strings or non-negative ints")
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ConfigError(f"rng child key must be non-negative, got {key}")
        return int(key)
    raise ConfigError(f"rng child keys must be strings or ints, got {type(key).__name__}")


class Rng:
    """Counter-based generator rooted at a 64-bit seed.

    ``child(*keys)`` derives an independent substream; the same seed and key
    path always produce the same stream no matter what was drawn elsewhere.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise ConfigError(f"seed must be an integer, got {type(seed).__name__}")
        if not 0 <= seed < _MAX_SEED:
            raise ConfigError(f"seed must be in [0, 2**64), got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys) -> "Rng":
        if not keys:
            raise ConfigError("child() needs at least one key")
        resolved = tuple(_resolve_key(k) for k in keys)
        return Rng(self.seed, self.spawn_key + resolved)

    # --- draw helpers; all return float64 / int64 arrays -------------------

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.float64)

    def normal(self, shape=None, scale: float = 1.0, loc: float = 0.0) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=scale, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        if high <= low:
            raise ConfigError(f"integers() needs high > low, got [{low}, {high})")
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
