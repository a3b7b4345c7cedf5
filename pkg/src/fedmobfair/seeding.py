"""Named seed derivation.

Every random stream in a run is derived from one master seed plus a purpose
string and indices, so that adding a consumer never shifts another stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *parts: object) -> int:
    """Hash ``(master_seed, *parts)`` into a 63-bit non-negative integer."""
    key = "\x1f".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(master_seed: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *parts))
