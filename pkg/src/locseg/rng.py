"""Counter-based random streams.

Every random draw in the package comes from a generator keyed by
``(seed, purpose, *counters)`` so serial and threaded runs see the same values.
"""
from __future__ import annotations

import zlib

import numpy as np


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Return an independent generator for one (seed, purpose, counters) key."""
    key = [int(seed) & 0xFFFFFFFF, _purpose_code(purpose)]
    key.extend(int(c) for c in counters)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
