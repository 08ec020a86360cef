"""Seeded random number streams for reproducible, order-independent simulation."""
from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

SubstreamKey = Union[str, int]


def _key_words(key: SubstreamKey) -> list[int]:
    """Map a substream key to stable 32-bit words (Python's hash() is salted)."""

    if isinstance(key, (int, np.integer)):
        value = int(key)
        if value < 0:
            raise ValueError("Substream integer keys must be non-negative.")
        return [value & 0xFFFFFFFF, value >> 32]
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class SeededRNG:
    """Root of a tree of named numpy generators derived from one integer seed.

    ``substream("bases", 3)`` always yields the same generator for the same
    seed, no matter how many other substreams were drawn before it, so work
    split across threads or chunks stays bit-identical.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError("Seed must be a non-negative integer.")
        self._seed = int(seed)

    @property
    def seed(self) -> int:
        return self._seed

    def substream(self, *keys: SubstreamKey) -> np.random.Generator:
        entropy = [self._seed & 0xFFFFFFFF, self._seed >> 32]
        for key in keys:
            entropy.extend(_key_words(key))
        return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(rng: Union[np.random.Generator, SeededRNG, int, None]) -> np.random.Generator:
    """Coerce the accepted rng arguments into a numpy Generator."""

    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SeededRNG):
        return rng.substream("default")
    return np.random.default_rng(rng)


__all__ = ["SeededRNG", "as_generator"]
