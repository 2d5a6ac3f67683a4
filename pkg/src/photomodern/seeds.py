"""Deterministic seeding helpers.

Every stochastic operation in this package draws from a
``numpy.random.Generator`` passed in by the caller, so identical seeds give
identical draw sequences across runs and platforms.  Per-sample seeds are
derived from (global seed, sample index) with a splitmix64-style mixer so
samples can be generated independently and in parallel.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 mixing step; maps a 64-bit int to a well-mixed 64-bit int."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(global_seed: int, index: int) -> int:
    """Derive an independent 64-bit seed for item `index` of a seeded run."""
    return splitmix64((splitmix64(global_seed & _MASK64) ^ (index & _MASK64)))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator with a platform-stable stream (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
