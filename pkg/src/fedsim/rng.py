"""Seed derivation for reproducible runs.

Every random decision in a run is drawn from a generator derived from the
single master seed plus a fixed stream tag and the indices that identify the
decision (round, client, epoch, ...). Any component of a run can therefore be
reproduced in isolation by rebuilding its derivation path.

Stream tags:
    DATASET       synthetic data generation
    SPLIT         stratified source/test splits
    PARTITION     Dirichlet client partitioning
    INIT          model weight initialization
    PRETRAIN      pretraining epoch shuffles
    PARTICIPANTS  per-round client sampling (one tag per round)
    SELECTION     per-round random data selection (one tag per round)
    SHUFFLE       per-(round, client, epoch) mini-batch shuffles
"""

from __future__ import annotations

import numpy as np

DATASET = 1
SPLIT = 2
PARTITION = 3
INIT = 4
PRETRAIN = 5
PARTICIPANTS = 6
SELECTION = 7
SHUFFLE = 8

_MASK64 = (1 << 64) - 1


def seed_sequence(*path: int) -> np.random.SeedSequence:
    """Build a SeedSequence from a derivation path of integers."""
    return np.random.SeedSequence([int(p) & _MASK64 for p in path])


def derive_rng(*path: int) -> np.random.Generator:
    """Return a fresh generator for the given derivation path."""
    return np.random.default_rng(seed_sequence(*path))


def derive_seed(*path: int) -> int:
    """Collapse a derivation path into a single 64-bit seed."""
    lo, hi = seed_sequence(*path).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)
