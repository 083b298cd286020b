"""Deterministic fan-out from one root seed to named random streams.

Every stochastic consumer (shuffling, attack start noise, class draws,
augmentation, weight init) gets its own generator derived from the root
seed, a purpose name, and optional indices such as the epoch. Streams are
therefore independent: adding draws to one purpose never shifts another,
and resuming at epoch k rebuilds exactly the streams epoch k used.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")


def seed_stream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """A dedicated generator for one named purpose under one root seed."""
    ss = np.random.SeedSequence([int(root_seed), _tag(name), *map(int, indices)])
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(root_seed: int, name: str, *indices: int) -> int:
    """A derived 63-bit integer seed, for APIs that take a plain seed."""
    ss = np.random.SeedSequence([int(root_seed), _tag(name), *map(int, indices)])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
