"""Named, splittable random streams on top of the Philox counter-based generator.

Every stochastic call site in the package receives its own stream, keyed by
(seed, name), so init / masking / dropout / data-order randomness stay
independent of each other and of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.blake2b(
        name.encode("utf-8"),
        key=int(seed).to_bytes(8, "little", signed=False),
        digest_size=16,
    ).digest()
    return np.frombuffer(digest, dtype=np.uint64)


def stream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for the (seed, name) pair."""
    return np.random.Generator(np.random.Philox(key=_stream_key(seed, name)))


class RngStreams:
    """Factory handing out independent named streams derived from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        return stream(self.seed, name)

    def child(self, name: str) -> "RngStreams":
        """Sub-factory whose streams are all prefixed with `name`."""
        digest = _stream_key(self.seed, "child:" + name)
        return RngStreams(int(digest[0]))
