"""Deterministic named random streams.

Every consumer of randomness asks for a stream by name; the stream is a
pure function of ``(seed, *names)`` so results never depend on call order
or on any global generator.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Return an independent generator for ``seed`` and a path of names."""
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                 spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(seed: int, *names: str | int) -> int:
    """A 63-bit integer seed derived from a parent seed and names."""
    return int(stream(seed, *names).integers(0, 2**63 - 1))
