"""Deterministic seed derivation for independent RNG streams.

Every stochastic stage derives its own stream from (root seed, stage name,
optional indices) so stages can be reproduced in isolation and no stage's
draws depend on how many draws another stage consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *parts: object) -> int:
    """Map (root, parts...) to a stable 64-bit seed via SHA-256."""
    key = "|".join([str(int(root))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, *parts: object) -> np.random.Generator:
    """A fresh PCG64 generator for the stream named by ``parts``."""
    return np.random.default_rng(derive_seed(root, *parts))
