"""Deterministic random substreams.

Every random draw in a run comes from a generator keyed by
``(master_seed, purpose_tag, iteration)``. Sampling and noise for a given
iteration therefore do not depend on which optimizer consumes them.
"""

from __future__ import annotations

import zlib

import numpy as np

SAMPLE = "sample"
NOISE = "noise"
INIT = "init"
DATA = "data"


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed: int, tag: str, iteration: int = 0) -> np.random.Generator:
    if seed < 0 or iteration < 0:
        raise ValueError("seed and iteration must be non-negative")
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, tag_key(tag), iteration])
    return np.random.Generator(np.random.PCG64(ss))
