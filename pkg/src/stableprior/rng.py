"""Seed hierarchy: one root seed, named deterministic substreams."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["named_stream"]


def named_stream(root_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Generator for the substream (root, label, indices...).

    The label is hashed with CRC-32 so streams with different purposes
    never collide even for adjacent index tuples.
    """
    if root_seed < 0:
        raise ValueError(f"root seed must be >= 0, got {root_seed}")
    entropy = [int(root_seed), zlib.crc32(label.encode())]
    entropy.extend(int(i) for i in indices)
    return np.random.default_rng(entropy)
