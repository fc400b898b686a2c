"""Keyed, counter-based random streams.

Every random draw in the package comes from a generator keyed by
``(seed, purpose, *counters)`` so results never depend on call order or on
how work is split across threads.
"""
from __future__ import annotations

import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def make_rng(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Return a Philox generator keyed by the seed, a purpose tag and counters."""
    key = [int(seed) & 0xFFFFFFFF, purpose_code(purpose)]
    key.extend(int(c) & 0xFFFFFFFF for c in counters)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
