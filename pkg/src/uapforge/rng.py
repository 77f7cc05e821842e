"""Seeded random number generation.

All randomness in the package flows through numpy ``Generator(PCG64)``
instances created here. Child streams are derived from a root seed plus
string tags, so every run is reproducible from one integer.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *tags: str) -> np.random.Generator:
    """PCG64 generator for (seed, tags); same arguments, same stream."""
    entropy = [int(seed)] + [zlib.crc32(t.encode("utf-8")) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *tags: str) -> int:
    """Stable derived integer seed for handing to sub-components."""
    entropy = [int(seed)] + [zlib.crc32(t.encode("utf-8")) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
