"""Deterministic seed derivation: one master seed, named substreams."""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(master_seed: int, *names) -> int:
    """Derive a stable 63-bit seed for a named substream of a master seed."""
    key = ":".join([str(int(master_seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def substream_rng(master_seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master_seed, *names))
