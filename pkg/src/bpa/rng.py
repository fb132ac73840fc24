"""Seeded randomness that stays batch-invariant.

Anything random in forward/backward accepts either one ``np.random.Generator``
for the whole batch or a sequence with one generator per sample. With per-sample
generators a sample's draws do not depend on which other samples share its batch,
which is what keeps sharded and serial runs identical.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np

RngLike = Union[np.random.Generator, Sequence[np.random.Generator], None]


def sample_rngs(seed: int, ids) -> list[np.random.Generator]:
    """One generator per sample id, derived from (seed, id)."""
    return [np.random.default_rng([int(seed), int(i)]) for i in ids]


def _require(rng: RngLike) -> None:
    if rng is None:
        raise ValueError("this operation is random and needs a seeded generator")


def uniform(rng: RngLike, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
    _require(rng)
    if isinstance(rng, np.random.Generator):
        return rng.uniform(low, high, size=shape)
    if len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} generators for a batch of {shape[0]}")
    return np.stack([r.uniform(low, high, size=shape[1:]) for r in rng])


def integers(rng: RngLike, n: int, low: int, high: int) -> np.ndarray:
    """One integer in [low, high) per sample."""
    _require(rng)
    if isinstance(rng, np.random.Generator):
        return rng.integers(low, high, size=n)
    return np.array([r.integers(low, high) for r in rng])


def split(rng: RngLike):
    """Independent child generator(s) with the same structure as ``rng``."""
    if rng is None:
        return None
    if isinstance(rng, np.random.Generator):
        return rng.spawn(1)[0]
    return [r.spawn(1)[0] for r in rng]
