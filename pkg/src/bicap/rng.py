"""Deterministic random-number streams.

Every stochastic component draws from a Philox counter-based generator whose
128-bit key is derived by hashing a (seed, *labels) tuple with BLAKE2b.
Philox is splittable and platform-independent, so any (seed, labels) pair
names the same stream on every machine and in any evaluation order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> int:
    """128-bit Philox key for the stream named by (seed, *labels).

    Labels may be ints or strings; they select independent substreams of the
    same seed (e.g. ("augment", step, index) vs ("dropout", step)).
    """
    tag = repr((int(seed),) + tuple(labels)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(tag, digest_size=16).digest(), "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Generator over the Philox stream named by (seed, *labels)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))
