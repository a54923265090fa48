"""Seeded counter-based random streams.

Every consumer asks for its own stream by label (``"init"``, ``"dropout"``,
``"data/shuffle"``, ...).  The stream key is the first 16 bytes of
``blake2b(f"{seed}/{label}")``, fed to numpy's Philox4x64 bit generator, so a
stream's draws depend only on (master seed, label) and never on how many
draws other consumers made.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}/{label}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class Rng:
    def __init__(self, seed: int, label: str = ""):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=stream_key(self.seed, label)))

    def stream(self, label: str) -> "Rng":
        """Independent child stream; labels nest with '/'."""
        full = f"{self.label}/{label}" if self.label else label
        return Rng(self.seed, full)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(shape)).astype(np.float32)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape) -> np.ndarray:
        """Float32 uniforms on [0, 1)."""
        return self._gen.random(shape, dtype=np.float32)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, options, size=None):
        return self._gen.choice(options, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, label={self.label!r})"
