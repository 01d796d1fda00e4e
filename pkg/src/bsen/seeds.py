"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name) -> same stream."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return np.random.Generator(np.random.PCG64(ss))
