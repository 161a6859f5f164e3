"""
utils/rng.py

Keyed random substreams.
Every random draw in a run comes from substream(seed, *key), so the draws a
worker sees depend only on (seed, worker, round, phase, step) and never on
thread scheduling or on how many other workers exist.
"""

from __future__ import annotations

import numpy as np

# Phase tags (last-but-one key component by convention)
PHASE_INIT = 0
PHASE_HEAD = 1
PHASE_PHI = 2
PHASE_TASK = 3
PHASE_ESTIMATE = 4
PHASE_GENERALIZE = 5
PHASE_PARTITION = 6
PHASE_GRAPH = 7
PHASE_DPSGD = 8

# worker slot used for draws shared by every worker (common φ(0), task-level draws)
SHARED = 2**32 - 1


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for (seed, *key)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))
