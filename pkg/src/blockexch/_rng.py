"""Seeded counter-based random streams."""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Philox generator for ``seed`` and an integer substream path.

    ``make_rng(s, sim, rep)`` gives the same draws no matter which worker or
    in what order it is created.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in stream))
    return np.random.Generator(np.random.Philox(ss))
