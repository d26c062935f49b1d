"""Counter-based random streams keyed by (seed, stream, counter...)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Named random stream.

    ``generator(*counter)`` returns a fresh Philox generator whose key is
    derived from ``(seed, stream, *counter)``, so any step can be replayed
    without drawing the steps before it.
    """

    seed: int
    stream: int = 0

    def generator(self, *counter: int) -> np.random.Generator:
        words = [int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(self.stream)] + [int(c) for c in counter]
        key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, self.stream * 1_000_003 + int(stream) + 1)
