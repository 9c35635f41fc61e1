"""Deterministic random streams.

All randomness in the package flows through Philox, a counter-based 64-bit
generator. A stream is addressed by a root seed plus a tuple of labels
(purpose, epoch, batch, ...); the labels are hashed with blake2b into the
Philox key, so streams are independent, reproducible across runs, and safe
to draw from in any order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator for the (seed, *labels) stream."""
    tag = "|".join([str(int(seed))] + [repr(label) for label in labels])
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))
