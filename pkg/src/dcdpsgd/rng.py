"""Seeded random streams.

Every consumer of randomness gets its own stream derived from
``(master seed, purpose, *ids)`` so that adding or removing one consumer never
shifts the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, *parts) -> np.random.Generator:
    """Independent generator for ``seed`` and a path of string/int labels."""
    entropy = [int(seed)] + [_tag(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
