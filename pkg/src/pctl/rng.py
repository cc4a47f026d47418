"""Named random sub-streams derived from a single master seed.

Each component (data generation, parameter init, dropout, negative-sample
shuffling, batch sampling, evaluation subsampling) draws from its own stream,
so toggling one component never perturbs the randomness seen by the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for (seed, name)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _stream_key(name)]))


class StreamSet:
    """Lazily materialized named streams sharing one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]
