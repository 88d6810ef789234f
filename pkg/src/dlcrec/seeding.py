"""Deterministic RNG derivation.

Every random draw in the package goes through :func:`derive_rng`, so results
depend only on (seed, key, tag) and never on processing order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_int(text: str) -> int:
    """64-bit integer digest of ``text`` that is stable across processes."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def derive_rng(seed: int, *parts: str) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_int(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
