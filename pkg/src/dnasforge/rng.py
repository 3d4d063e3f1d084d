"""Seeded random stream shared by sampling, initialisation and shuffling."""
from __future__ import annotations

import numpy as np

#: Identity of the generator; stored in checkpoints so resumes can refuse a mismatch.
RNG_ALGORITHM = "numpy-PCG64/v1"

_GUMBEL_CLAMP = 1e-12


class Rng:
    """Thin wrapper over ``numpy.random.Generator`` with a PCG64 core.

    Same seed and same call sequence give the same stream on any platform
    running the same numpy build.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.keys: tuple = ()
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def gumbel(self, size=None):
        """Standard Gumbel draws, ``-log(-log(u))`` with ``u`` clamped away from 0 and 1."""
        u = np.clip(self._gen.random(size), _GUMBEL_CLAMP, 1.0 - _GUMBEL_CLAMP)
        return -np.log(-np.log(u))

    def child(self, *keys: int) -> "Rng":
        """Independent stream derived from this seed and ``keys``; does not advance self."""
        path = self.keys + tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *path])
        out = Rng.__new__(Rng)
        out.seed, out.keys = self.seed, path
        out._gen = np.random.Generator(np.random.PCG64(ss))
        return out

    def get_state(self) -> dict:
        return {"algorithm": self.algorithm, "seed": self.seed, "keys": list(self.keys),
                "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        if state.get("algorithm") != self.algorithm:
            raise ValueError(f"rng algorithm mismatch: {state.get('algorithm')!r} != {self.algorithm!r}")
        self.seed = int(state["seed"])
        self.keys = tuple(state.get("keys", ()))
        self._gen.bit_generator.state = state["bit_generator"]
