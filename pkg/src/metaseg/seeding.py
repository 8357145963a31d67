"""Deterministic seed derivation.

Every stochastic component derives its own seed from a master seed plus a
tuple of context parts (step index, shot index, string tags, ...) so that
runs are replayable and independent workers never share a stream.
"""

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary ints/strings/floats."""
    h = hashlib.blake2s()
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") & _MASK63


def rng_from(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
