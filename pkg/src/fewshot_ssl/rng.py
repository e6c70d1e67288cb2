"""Counter-based random streams derived from one run seed.

Each consumer (shuffling, per-image augmentation, rotation labels, episode
sampling, weight init) gets its own stream keyed by a name and integer
counters, so switching a task on or off never shifts another task's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream counters must be non-negative")
    return part


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for ``(seed, *keys)``; identical keys give identical draws."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
