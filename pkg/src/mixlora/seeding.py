"""Deterministic seed splitting.

Every random stream in the package is derived from one integer seed and a
path of string keys, e.g. ``stream(7, "layer0", "a_factors")``. Each key is
hashed with CRC-32 into the ``spawn_key`` of a ``numpy.random.SeedSequence``,
so streams are independent of each other and of the order in which they
are requested. Adding a new stream never perturbs existing ones.
"""

import zlib

import numpy as np


def spawn_key(*keys) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(k).encode("utf-8")) for k in keys)


def stream(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=spawn_key(*keys))
    return np.random.default_rng(ss)
