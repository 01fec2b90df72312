"""Deterministic random-stream derivation.

Every stochastic choice in the package (init values, batch order, sampling)
draws from a Generator obtained here, so any run is a pure function of its
seed. Substreams are keyed by string/int tags hashed with sha256, which is
stable across platforms and numpy versions.
"""

import hashlib

import numpy as np


def _entropy(tag) -> int:
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the (seed, *tags) stream, independent of all other tags."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed)] + [_entropy(t) for t in tags])
