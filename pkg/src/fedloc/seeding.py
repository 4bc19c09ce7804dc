"""Deterministic seed derivation shared by every stochastic component."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Collapse a mixed tuple of ints and short labels into one 32-bit seed.

    The mapping is pure and platform independent (np.random.SeedSequence is a
    specified algorithm), so every shuffle, subsample and initialization in the
    package can be keyed by (base seed, context...) without hidden state.
    """
    entropy: list[int] = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            entropy.append(int(part) & 0xFFFF_FFFF_FFFF_FFFF)
        elif isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
