"""Seed plumbing: every random draw is keyed by a tuple of integers."""

from __future__ import annotations

import numpy as np


def seed_words(seed) -> list[int]:
    """Flatten an int or nested sequence of ints into a SeedSequence entropy list."""
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    out: list[int] = []
    for s in seed:
        out.extend(seed_words(s))
    return out


def derive(seed, *words: int) -> list[int]:
    return [*seed_words(seed), *words]


def generator(seed, *words: int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *words))
