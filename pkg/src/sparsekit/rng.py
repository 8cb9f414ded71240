"""Counter-based random streams.

Draws come from numpy's Philox generator, keyed by the run seed with the
stream number placed in the high counter word. Equal ``(seed, stream)``
pairs replay the same sequence on every platform, which is what lets the
gradient checker pin the noise of stochastic layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAM_INIT = 0
STREAM_DATA = 1
STREAM_NOISE = 2
STREAM_PRUNE = 3

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """Seed plus stream counter identifying one reproducible draw sequence."""

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= _U64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if not 0 <= self.stream <= _U64:
            raise ValueError(f"stream must fit in 64 unsigned bits, got {self.stream}")

    def child(self, stream: int) -> RngState:
        """Same seed, different stream."""
        return RngState(self.seed, stream)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        counter = np.array([0, 0, 0, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.seed, counter=counter))
