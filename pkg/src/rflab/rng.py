"""Deterministic random streams.

Every random draw in the package comes from a counter-based Philox generator
keyed by (master seed, stream tags).  Streams are independent of each other
and of the order in which they are created, which is what makes whole runs
bit-reproducible and lets pair files store only the RNG key instead of the
noise vectors themselves.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, *tags) -> np.ndarray:
    """Philox key for the stream identified by (seed, *tags).

    Tags may be ints or strings; the tuple is hashed so unrelated tags can
    never collide by arithmetic accident.
    """
    digest = hashlib.sha256(repr((int(seed),) + tuple(tags)).encode()).digest()
    word = int.from_bytes(digest[:8], "little")
    return np.array([int(seed) & _MASK64, word], dtype=np.uint64)


def substream(seed: int, *tags) -> np.random.Generator:
    """Fresh generator for the (seed, *tags) stream, always at position 0."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))


def record_noise(seed: int, index: int, dim: int) -> np.ndarray:
    """Standard-normal noise vector of record `index` in a pair-generation run.

    Regenerating the vector from (seed, index) is exact, so datasets may omit
    stored noise and keep only the key.
    """
    return substream(seed, "pair", index).standard_normal(dim)
