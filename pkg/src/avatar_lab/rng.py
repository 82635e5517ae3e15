"""Deterministic seed derivation for every random stream in the pipeline.

All randomness flows from one master seed through named paths, so any
component (a dataset record, a training loop, a single render) owns an
independent counter-based stream that is reproducible regardless of how many
other streams were consumed before it.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _path_entropy(path: tuple) -> list[int]:
    out = []
    for part in path:
        if isinstance(part, (bool, float)):
            raise TypeError(f"rng path components must be int or str, got {part!r}")
        if isinstance(part, (int, np.integer)):
            out.append(int(part) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            out.append(int.from_bytes(digest[:8], "little"))
    return out


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF] + _path_entropy(path))


def derive_seed(master_seed: int, *path) -> int:
    """A 63-bit integer seed, a pure function of (master_seed, path)."""
    return int(seed_sequence(master_seed, *path).generate_state(1, np.uint64)[0] >> 1)


def make_rng(master_seed: int, *path) -> np.random.Generator:
    """Philox generator on an independent stream for this path."""
    return np.random.Generator(np.random.Philox(seed_sequence(master_seed, *path)))


def make_torch_gen(master_seed: int, *path) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master_seed, *path))
    return gen
