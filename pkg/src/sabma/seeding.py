"""Sub-seed derivation from a single master seed.

Every random stream is ``SeedSequence(master, spawn_key=(stream, index))``
with a fixed integer per stream below. Nothing touches global RNG state.
"""

from __future__ import annotations

import numpy as np

DATA = 0
INIT = 1
TRAIN = 2
SAMPLE = 3
LANCZOS = 4
SHUFFLE = 5
CORRUPT = 6
SWAG = 7


def seed_sequence(master: int, stream: int, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(int(stream), int(index)))


def rng(master: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, stream, index))


def int_seed(master: int, stream: int, index: int = 0) -> int:
    """A 32-bit integer seed for APIs that take plain ints."""
    return int(seed_sequence(master, stream, index).generate_state(1)[0])
