"""Seeded random streams.

Every random draw in the package goes through :class:`Rng`, a (seed, stream)
pair backed by numpy's PCG64 bit generator.  A stream id picks an independent
substream of the root seed, so the data, init, sampling and shuffle stages can
be re-seeded without disturbing one another.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALGORITHM = "numpy.PCG64/SeedSequence(entropy=seed, spawn_key=(stream,))"

# named substreams of one root seed
DATA = 1
INIT = 2
SAMPLING = 3
SHUFFLE = 4
VERIFY = 5

STREAMS = {"data": DATA, "init": INIT, "sampling": SAMPLING, "shuffle": SHUFFLE, "verify": VERIFY}

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Rng:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "Rng":
        """Derive a substream keyed by ``keys`` (non-negative ints)."""
        state = np.random.SeedSequence(entropy=[self.stream, *keys]).generate_state(1, np.uint64)
        return Rng(self.seed, int(state[0]))

    def named(self, name: str) -> "Rng":
        return self.child(STREAMS[name])
