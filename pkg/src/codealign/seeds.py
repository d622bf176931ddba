"""Named random streams derived from one global seed.

Every stage asks for its own stream by name, so adding a stage never shifts
the numbers another stage sees.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: str) -> int:
    """A 63-bit seed determined by ``seed`` and the stream path ``names``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a non-negative 64-bit integer, got {seed}")
    words = [seed & 0xFFFFFFFF, seed >> 32]
    for name in names:
        words.append(int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little"))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))


def stream(seed: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
