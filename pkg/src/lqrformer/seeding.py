"""Named random substreams derived from one root seed.

``substream(seed, "datagen", 3)`` is independent of every other
``(name, *keys)`` combination and of the order streams are requested in.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name),) + tuple(int(k) for k in keys))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, name, *keys)))


def derived_seed(seed: int, name: str, *keys: int) -> int:
    """A plain integer seed for APIs that want one (stored in file headers)."""
    return int(seed_sequence(seed, name, *keys).generate_state(1, dtype=np.uint32)[0])
