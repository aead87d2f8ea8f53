"""Seed derivation. Every random stream is keyed by (global seed, stream name, keys...)."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for one named stream.

    Arrays drawn from a stream are indexed by entity id, so appending
    entities leaves the draws of existing ones untouched.
    """
    entropy = [int(seed) & 0xFFFFFFFF, stream_key(name), *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])
