"""Deterministic random streams.

All randomness in the package flows through Philox (counter-based), keyed
by an integer seed plus a tuple of small stream tags. Philox guarantees
the same draws on every platform, and separate tags give statistically
independent streams, so parallel workers can each build their own stream
without sharing state.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for the (seed, *stream) cell; same args, same draws."""
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))
