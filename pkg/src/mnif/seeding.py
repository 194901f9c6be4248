"""Named random substreams derived from one root seed.

A stream's seed depends only on (root seed, name), so adding a new consumer
does not shift the randomness seen by existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])


def rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream(seed, name))
