"""Named, reproducible random substreams.

Every stochastic step in the package draws from its own substream so that
adding or reordering one step never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *tags: str | int) -> np.random.Generator:
    """Return a Generator keyed by a base seed plus a tag path.

    Tags are strings or ints; strings are hashed with crc32 so the key
    is stable across processes and platforms.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            words.append(int(tag) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
