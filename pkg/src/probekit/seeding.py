"""Hierarchical seed derivation.

Every random stream in the pipeline is ``derive_rng(seed, *path)`` where the
path names the consumer (stage, purpose, index). Equal paths give equal
streams; distinct paths give statistically independent ones.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed path integers must be non-negative")
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))


def derive_rng(seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for APIs that want a plain int."""
    return int(seed_sequence(seed, *path).generate_state(2, np.uint64)[0] >> np.uint64(1))
