"""Seeded random streams."""
from __future__ import annotations

from typing import Sequence, Tuple, Union

import numpy as np

Shape = Union[int, Sequence[int]]


class RngStream:
    """PCG64 stream keyed by (seed, stream key).

    Streams with different keys are derived through ``SeedSequence`` spawn
    keys and never share state. ``position`` counts uniform draws.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key: Tuple[int, ...] = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))
        self.position = 0

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(keys))

    def uniform(self, shape: Shape) -> np.ndarray:
        values = self._generator.random(shape)
        self.position += int(np.size(values))
        return values

    def normal(self, shape: Shape) -> np.ndarray:
        """Standard normals via Box-Muller on this stream's uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        values = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return values[:count].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        self.position += n
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key}, position={self.position})"
