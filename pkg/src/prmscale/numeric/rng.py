"""Counter-based random streams.

Every stochastic draw in the package goes through :class:`RngStream`.  A
stream is a Philox key (seed + purpose tag); sub-streams for an
``(episode, step, candidate)`` triple are obtained by placing the triple in
the high words of the Philox counter, so they never overlap and can be
created in any order (or in parallel) without changing results.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


class RngStream:
    """A reproducible, splittable random stream.

    Parameters
    ----------
    seed : int
        64-bit seed.
    purpose : str
        Namespace so that unrelated consumers of the same seed (init,
        data generation, policy noise...) draw independent numbers.
    """

    def __init__(self, seed: int, purpose: str = "default"):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & _MASK64
        self.purpose = purpose
        self._key = np.array([self.seed, _tag(purpose)], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, purpose={self.purpose!r})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, purpose: str) -> "RngStream":
        return RngStream(self.seed, f"{self.purpose}/{purpose}")

    def substream(self, episode: int = 0, step: int = 0, candidate: int = 0) -> np.random.Generator:
        """Independent generator for one ``(episode, step, candidate)`` triple."""
        counter = np.array(
            [0, candidate & _MASK64, step & _MASK64, episode & _MASK64], dtype=np.uint64
        )
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))

    # thin pass-throughs for the sequential (non-split) use
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def gaussian_vector(rng, dim: int, sigma: float) -> np.ndarray:
    """i.i.d. ``N(0, sigma^2)`` draws; ``sigma == 0`` gives exact zeros."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if dim < 0:
        raise ValueError(f"dim must be >= 0, got {dim}")
    gen = as_generator(rng)
    if sigma == 0:
        # still consume draws so downstream streams do not shift with sigma
        gen.standard_normal(dim)
        return np.zeros(dim)
    return sigma * gen.standard_normal(dim)
