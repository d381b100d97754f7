"""Counter-based random streams.

A stream is addressed by ``(seed, *tags)``; no global state is involved,
so any draw can be regenerated from its address alone.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("stream tags must be non-negative")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def stream(seed: int, *tags) -> np.random.Generator:
    key_seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag_int(t) for t in tags))
    key = key_seq.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
