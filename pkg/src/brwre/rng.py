"""Seeding and random-stream construction.

Reproducibility contract (also documented in the README):

* All stochastic code draws from numpy ``Generator`` objects backed by
  the counter-based Philox4x64-10 bit generator, keyed *directly* with a
  64-bit seed (no SeedSequence entropy mixing), counter starting at 0.
* Derived seeds come from the splitmix64 output function: stream ``i``
  of master seed ``s`` is ``splitmix64(s + (i + 1) * GOLDEN mod 2^64)``.
  This is scheduling-independent: replica ``i`` always gets the same
  seed no matter how work is distributed over processes.

Nothing in this module keeps global state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """The splitmix64 finalizer: a 64-bit bijective mixing function."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Seed for sub-stream ``index`` of ``master`` (index >= 0)."""
    if index < 0:
        raise ValueError("stream index must be non-negative")
    return splitmix64((master + (index + 1) * GOLDEN) & _MASK64)


def make_generator(seed: int) -> np.random.Generator:
    """Philox4x64 generator keyed directly with ``seed``."""
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))
