"""Named, seedable, splittable random streams on top of the Philox counter-based generator.

Every stochastic operation in the package takes an explicit stream, so a run is
fully determined by its root seed and the (stable) names of the splits that
derive each consumer's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RandomStream"]


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for name in path:
        h.update(b"/")
        h.update(name.encode())
    return int.from_bytes(h.digest()[:16], "little")


class RandomStream:
    """One independent random stream, addressable by seed and split path."""

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        self._gen: np.random.Generator | None = None

    def split(self, name: str) -> "RandomStream":
        """Derive an independent child stream; same (seed, path) -> same stream."""
        return RandomStream(self.seed, self.path + (str(name),))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=_derive_key(self.seed, self.path))
            )
        return self._gen

    # Draw helpers; all return float64 / int64 arrays.

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(loc=loc, scale=scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low=low, high=high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"
