"""Seeded random streams.

A root seed fans out into labeled sub-streams (``"env"``, ``"noise"``, ...).
Each sub-stream is a Philox counter-based generator keyed by the seed and a
hash of its label, so adding a new consumer never shifts the draws seen by
an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """Deterministic generator identified by ``seed`` and a label path."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, label: str) -> "Rng":
        """Independent child stream. Same seed and label give the same stream."""
        return Rng(self.seed, self.path + (label,))

    def normal(self, mean=0.0, std=1.0, size=None):
        return self._gen.normal(mean, std, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self) -> str:
        label = "/".join(self.path) or "<root>"
        return f"Rng(seed={self.seed}, stream={label})"
