"""Deterministic RNG stream derivation.

All randomness in the package flows from one master seed. Independent stages
draw from child generators derived via SeedSequence spawn keys, so adding
draws to one stage never shifts the streams of another, and any single sample
can be regenerated in isolation from (master_seed, stage, indices...).
"""
from __future__ import annotations

import numpy as np

# Stage identifiers used as the first element of a spawn key. Values are
# frozen: changing them silently changes every derived dataset.
STAGE_MODES = 0
STAGE_SHAPE = 1
STAGE_PLANES = 2
STAGE_MISALIGN = 3
STAGE_POOL = 4
STAGE_INIT = 5
STAGE_SHUFFLE = 6
STAGE_MESH = 7
STAGE_EVAL = 8


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    """Return a Generator for the stream addressed by (master_seed, *path).

    path elements must be non-negative integers; typically a STAGE_* constant
    followed by sample/epoch indices.
    """
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError("rng path elements must be non-negative")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.default_rng(seq)
