"""Seeded random-number management with named independent substreams.

Every stochastic component of an experiment draws from its own substream
(truth noise, observation noise, one stream per particle, resampling,
initialization), so a single integer seed reproduces the whole run
bit-for-bit regardless of which filter consumes how many draws.
"""

from __future__ import annotations

import zlib

import numpy as np


class RandomStream:
    """Factory of independent, deterministically derived generators."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def substream(self, name: str) -> np.random.Generator:
        """Named substream; repeated calls return the same (stateful) generator."""
        if name not in self._cache:
            key = zlib.crc32(name.encode("utf-8"))
            seq = np.random.SeedSequence([self.seed, key])
            self._cache[name] = np.random.Generator(np.random.PCG64(seq))
        return self._cache[name]

    def particle_streams(self, n_particles: int) -> list[np.random.Generator]:
        return [self.substream(f"particle-noise-{j}") for j in range(n_particles)]
