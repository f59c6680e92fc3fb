"""Deterministic seed derivation.

Seeds are 64-bit unsigned integers everywhere. Derived streams come from
sha256 over the parent seed plus string labels, so the mapping is stable
across platforms and numpy versions and can be recorded in manifests.
"""

from __future__ import annotations

import hashlib

import numpy as np

MAX_SEED = 2 ** 64 - 1


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def derive_seed(seed, *labels) -> int:
    """Child seed from a parent seed and any number of string/int labels."""
    seed = check_seed(seed)
    h = hashlib.sha256()
    h.update(str(seed).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def generator(seed, *labels) -> np.random.Generator:
    if labels:
        seed = derive_seed(seed, *labels)
    else:
        seed = check_seed(seed)
    return np.random.Generator(np.random.PCG64(seed))
