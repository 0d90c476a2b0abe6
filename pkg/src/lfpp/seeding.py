"""Deterministic substreams derived from a 64-bit master seed.

Every random draw in the package goes through :func:`substream`, keyed by a
tuple ``(module id, band/slab index, replica index, ...)``.  Keys are mapped to
independent streams with numpy's ``SeedSequence`` spawn-key mechanism, so
replicas can be generated in any order (or concurrently) with identical output.
"""
from __future__ import annotations

import numpy as np

# module ids, fixed forever: changing them changes every stored result
ETA = 1
DGFF_EXACT = 2
DGFF_BAND = 3
DGFF_BAND_SUM = 4
REPLICA = 5
TEST = 99

MASK64 = (1 << 64) - 1


def check_seed(seed) -> int:
    seed = int(seed)
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) & MASK64 for k in key))


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 generator for ``(seed, key)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))


def philox_key(seed: int, *key: int) -> np.ndarray:
    """128-bit Philox key for counter-addressed streams (noise tiles)."""
    return seed_sequence(seed, *key).generate_state(2, dtype=np.uint64)


def replica_seed(seed: int, *key: int) -> int:
    """Derive a 64-bit child seed, e.g. one per experiment replica."""
    return int(seed_sequence(seed, REPLICA, *key).generate_state(1, dtype=np.uint64)[0])
