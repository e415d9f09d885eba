"""
Deterministic random streams.

Every consumer derives its own substream from the run seed and a fixed tuple of
labels, so results do not depend on the order in which streams are consumed.
"""

import hashlib
import math
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

Shape = Union[int, Tuple[int, ...], None]


def _label_key(label: Any) -> int:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class Rng:
    """PCG64 stream keyed by (seed, label path), with Box-Muller Gaussians."""

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, *labels: Any) -> "Rng":
        """Derive an independent child stream from hashable labels."""
        return Rng(self.seed, self.path + tuple(_label_key(label) for label in labels))

    def describe(self) -> Dict[str, Any]:
        return {"seed": self.seed, "path": list(self.path)}

    @classmethod
    def from_description(cls, description: Dict[str, Any]) -> "Rng":
        return cls(description["seed"], description.get("path", ()))

    def random(self, size: Shape = None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._generator.random(size)

    def uniform(self, low: float, high: float, size: Shape = None) -> np.ndarray:
        return low + (high - low) * self._generator.random(size)

    def normal(self, size: Shape = None) -> np.ndarray:
        """Standard normal draws via the Box-Muller transform."""
        shape = () if size is None else ((size,) if isinstance(size, int) else tuple(size))
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = 1.0 - self._generator.random(pairs)  # (0, 1], keeps log finite
        u2 = self._generator.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        values = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:count]
        if not shape:
            return values[0]
        return values.reshape(shape)

    def integers(self, high: int, size: Shape = None) -> np.ndarray:
        """Uniform integers on [0, high)."""
        return self._generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def categorical(self, probabilities: Sequence[float], size: int) -> np.ndarray:
        """Draw class indices from a discrete distribution."""
        p = np.asarray(probabilities, dtype=np.float64)
        cumulative = np.cumsum(p / p.sum())
        draws = np.searchsorted(cumulative, self._generator.random(size), side="right")
        return np.minimum(draws, len(p) - 1).astype(np.int64)
