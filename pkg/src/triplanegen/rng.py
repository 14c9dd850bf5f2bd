"""Seeded generator hierarchy.

All randomness in the pipeline flows through named streams derived from one
root seed, so that camera draws, style noise, timesteps, and initialization
are independently reproducible.
"""

from __future__ import annotations

import numpy as np

STREAMS = ("camera", "noise", "timestep", "style", "init", "split", "light",
           "render")


class RngHierarchy:
    """One named ``numpy.random.Generator`` per randomness source."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed)
        children = ss.spawn(len(STREAMS))
        self._streams = {name: np.random.default_rng(child)
                         for name, child in zip(STREAMS, children)}

    def __getattr__(self, name) -> np.random.Generator:
        try:
            return self._streams[name]
        except KeyError:
            raise AttributeError(name) from None

    def stream(self, name: str) -> np.random.Generator:
        return self._streams[name]
