"""Counter-based random streams.

A :class:`CounterStream` names a position in a tree of independent streams
(master seed, then a path such as ``(trial, agent)``).  Draws for iteration
``k`` come from a Philox generator whose key is derived from the path and
whose counter starts at ``k`` in its third word, so the samples used at a
given iteration never depend on what was drawn before it or on which
process computed it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CounterStream:
    seed: int
    path: tuple[int, ...] = ()
    _key: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or any(p < 0 for p in self.path):
            raise ValueError("seed and path entries must be non-negative")
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        object.__setattr__(self, "_key", ss.generate_state(2, np.uint64))

    def child(self, *ids: int) -> CounterStream:
        return CounterStream(self.seed, self.path + tuple(int(i) for i in ids))

    def generator(self, k: int, lane: int = 0) -> np.random.Generator:
        """Generator for counter ``k``; ``lane`` separates draws sharing ``k``."""
        if k < 0 or lane < 0:
            raise ValueError("counters must be non-negative")
        counter = np.array([0, 0, k, lane], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))
