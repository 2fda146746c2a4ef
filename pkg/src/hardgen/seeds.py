"""Deterministic seed derivation.

Every stochastic stage derives its generator from (root seed, purpose tag,
index...) so stages can run in any order, or in parallel, without streams
colliding or drifting between runs.
"""

from __future__ import annotations

import zlib

import numpy as np

_U32 = 2**32


def derive_seed(root: int, *path: int | str) -> int:
    """Fold a root seed and a purpose path into one 32-bit seed."""
    parts = [int(root) % _U32]
    for item in path:
        if isinstance(item, str):
            parts.append(zlib.crc32(item.encode("utf-8")))
        else:
            parts.append(int(item) % _U32)
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def rng_for(root: int, *path: int | str) -> np.random.Generator:
    """Generator seeded from `derive_seed(root, *path)`."""
    return np.random.default_rng(derive_seed(root, *path))
