"""Named random streams derived from one experiment seed."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; the same (seed, name) always gives the same stream."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
