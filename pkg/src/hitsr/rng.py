"""Deterministic random state with explicit, serializable bookkeeping.

All randomness in the package flows through :class:`RngState` so that a
checkpoint can persist the exact generator state and a resumed run continues
the same stream. PCG64 is the only supported algorithm; the label is stored
so a future change cannot silently reinterpret old state blobs.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigurationError, ContractError

_ALGORITHM = "pcg64"


def _derive_seed(seed: int, tag: str) -> int:
    # crc32 keeps derived streams stable across platforms and sessions.
    return (seed * 0x9E3779B1 + zlib.crc32(tag.encode("utf-8"))) % (2**63)


class RngState:
    """A seeded PCG64 generator plus a draw counter.

    The counter is not needed to restore state (the raw bit-generator state
    is persisted too) but makes logs and reports self-describing.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, int) or seed < 0:
            raise ConfigurationError(f"seed must be a non-negative int, got {seed!r}")
        self.seed = seed
        self.algorithm = _ALGORITHM
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def derive(self, tag: str) -> "RngState":
        """Independent child stream, reproducible from (seed, tag) alone."""
        return RngState(_derive_seed(self.seed, tag))

    def normal(self, shape, std=1.0, mean=0.0) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None) -> np.ndarray:
        self.counter += 1
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def truncated_normal(self, shape, std=0.02, bound=2.0) -> np.ndarray:
        """Normal(0, std) with draws beyond bound*std rejected and redrawn."""
        self.counter += 1
        out = self._gen.normal(0.0, std, size=shape)
        limit = bound * std
        bad = np.abs(out) > limit
        while bad.any():
            out[bad] = self._gen.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > limit
        return out

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "algorithm": self.algorithm,
            "counter": self.counter,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        if state.get("algorithm") != _ALGORITHM:
            raise ContractError(
                f"rng state algorithm {state.get('algorithm')!r} is not {_ALGORITHM!r}"
            )
        obj = cls(int(state["seed"]))
        obj.counter = int(state["counter"])
        obj._gen.bit_generator.state = state["bit_generator"]
        return obj
