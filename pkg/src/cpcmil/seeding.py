"""Deterministic RNG derivation.

Every stochastic component draws from a generator derived from the run seed
plus a structural path (stream tag, fold index, epoch, ...), so re-running a
command with the same seed replays every draw bit-for-bit.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

# Stream tags keep independent consumers of the same run seed decorrelated.
STREAM_CORPUS = 1
STREAM_SPLITS = 2
STREAM_CPC = 3
STREAM_MIL = 4
STREAM_SWEEP = 5
STREAM_VERIFY = 6


def stable_hash(text: str) -> int:
    """Platform-independent 32-bit hash for mixing string ids into seed paths."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_seed(seed: int, *path: int) -> int:
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in path])
    return int(ss.generate_state(1)[0])


def make_rng(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in path])
    return np.random.default_rng(ss)


def seed_torch(seed: int, *path: int) -> None:
    """Seed torch's global generator (module init, dropout) from a derived seed."""
    torch.manual_seed(child_seed(seed, *path))
