"""Splittable, counter-based random streams.

Every random draw in the package comes from a named Philox stream derived by
hashing (seed, *tags). Streams are independent of replica count and of the
order other streams are consumed in, which is what makes initialization and
data order reproducible across sharding configurations.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the stream named by (seed, *tags)."""
    msg = repr((int(seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(msg).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def truncated_normal(
    rng: np.random.Generator, shape, std: float, dtype=np.float32
) -> np.ndarray:
    """Normal draws with |z| > 2 resampled, scaled by std."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(dtype)
