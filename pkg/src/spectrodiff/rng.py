"""Seeded random streams.

All randomness is drawn from numpy's PCG64 bit generator seeded through
``SeedSequence``. Both are specified and platform independent, so a given
(seed, stage, index) triple yields the same stream everywhere. Stage names
are hashed with CRC-32 to form part of the spawn key.
"""
from __future__ import annotations

import zlib

import numpy as np


def stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def substream(seed: int, stage: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, stage, *index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stage_key(stage), *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))


def substreams(seed: int, stage: str, count: int, offset: int = 0) -> list[np.random.Generator]:
    return [substream(seed, stage, offset + i) for i in range(count)]
