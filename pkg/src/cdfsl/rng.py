"""Keyed random streams.

Every stochastic operation receives an explicit ``numpy.random.Generator``.
Streams are derived from a root seed plus a path of keys, so the stream for
(epoch 3, batch 7) is the same whether or not epochs 0-2 were run in this
process. That property is what makes checkpoint resume and parallel episode
evaluation bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean keys are ambiguous")
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        # crc32 is stable across interpreter runs, unlike hash()
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key type {type(key).__name__}")


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent Philox generator for ``seed`` and a key path."""
    entropy = [_key_to_int(seed), *(_key_to_int(k) for k in path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path: int | str) -> int:
    """Derive a 31-bit integer seed for a sub-component."""
    return int(stream(seed, *path).integers(0, 2**31 - 1))
