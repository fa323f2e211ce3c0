"""Deterministic random-stream derivation.

Every source of randomness in the package is a numpy Generator derived from
a single integer seed plus a tuple of string/int tags. Derivation goes
through blake2b, never Python's salted hash(), so streams are stable across
processes and machines. Streams for different tags are independent, which
makes per-sample scoring results independent of scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *tags: object) -> list[int]:
    """Map (seed, tags...) to a stable entropy key for SeedSequence."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    """Independent Generator for the given seed and tag path."""
    return np.random.default_rng(np.random.SeedSequence(derive_key(seed, *tags)))
