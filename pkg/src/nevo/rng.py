"""Seeded, splittable random streams.

Every stochastic component draws from an ``RngStream`` identified by a
64-bit seed plus a path of integer tags (e.g. ``(generation,
individual)``).  Identical ``(seed, path)`` pairs produce identical
sequences on every platform and under any thread schedule; distinct
paths are statistically independent.  Built on numpy's counter-based
Philox generator keyed through ``SeedSequence`` spawn keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        object.__setattr__(self, "path", tuple(int(t) for t in self.path))
        if any(t < 0 for t in self.path):
            raise ValueError(f"path tags must be non-negative, got {self.path}")

    def child(self, *tags: int) -> "RngStream":
        """Derive an independent stream by appending tags to the path."""
        return RngStream(self.seed, self.path + tuple(int(t) for t in tags))

    def generator(self) -> np.random.Generator:
        """Fresh generator; repeated calls restart the same sequence."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))
