"""Seeded random number generation.

All stochastic behaviour in the pipeline flows through PCG64 generators
built here, so a run is fully reproducible from its integer seeds and
cohorts are portable across machines.  Derived streams mix the base seed
with integer keys (fold index, epoch, sample index) through
``numpy.random.SeedSequence`` rather than ad-hoc arithmetic.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` mixed with optional subkeys."""
    if keys:
        seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    else:
        seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(seq))
