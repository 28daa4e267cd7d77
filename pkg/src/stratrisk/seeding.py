"""Named random sub-streams derived from one master seed.

Each consumer (fold assignment, row subsampling, ...) draws from its own
stream, so changing one component never reshuffles another.
"""

import zlib

import numpy as np


def _sequence(master: int, name: str, keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=(zlib.crc32(name.encode()), *map(int, keys)))


def substream(master: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(_sequence(master, name, keys))


def subseed(master: int, name: str, *keys: int) -> int:
    return int(_sequence(master, name, keys).generate_state(1)[0])
