"""Seeded RNG streams.

Every run owns explicit `numpy.random.Generator` streams derived from one
seed; nothing in the package touches numpy's global RNG state.
"""
from __future__ import annotations

import numpy as np

# Fixed substream roles so a run's randomness is reproducible piecewise.
_STREAMS = ("init", "noise", "data", "eval", "search")


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Derive one independent generator per substream role from `seed`."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(seq))
            for name, seq in zip(_STREAMS, children)}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
