"""Deterministic randomness

One top-level seed fans out to per-stage sub-seeds by fixed offsets, so a
stage can be rerun in isolation and draw exactly what it drew inside a full
run. PCG64 streams are reproducible across platforms.
"""

from __future__ import annotations

from typing import Dict, List

import numpy as np
import torch


SEED_OFFSETS: Dict[str, int] = {
    'synth': 0,
    'detect': 1_000,
    'features': 2_000,
    'baggen': 3_000,
    'stage1': 4_000,
    'stage2': 5_000,
    'eval': 6_000,
    'ablate': 7_000,
}

_SEED_SPACE = 2**63 - 1


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, stream: str) -> int:
    try:
        offset = SEED_OFFSETS[stream]
    except KeyError:
        raise ValueError(f'unknown seed stream {stream!r}') from None
    return seed + offset


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return seeded_rng(derive_seed(seed, stream))


def spawn_rngs(rng: np.random.Generator, count: int) -> List[np.random.Generator]:
    """Independent child streams, one per patient / sequence / grid cell"""
    seeds = rng.integers(0, _SEED_SPACE, size=count)
    return [seeded_rng(int(s)) for s in seeds]


def torch_seed(rng: np.random.Generator) -> int:
    """Seed torch's global generator from a numpy stream and return the seed"""
    seed = int(rng.integers(0, 2**31 - 1))
    torch.manual_seed(seed)
    return seed


def deterministic_mode(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels: required for byte-identical reruns"""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
