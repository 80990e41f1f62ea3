"""Named, reproducible random streams and stable seed derivation."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def stream(seed: int, purpose: str) -> np.random.Generator:
    """A generator dedicated to one purpose, so purposes never share draws."""
    return np.random.default_rng([int(seed) & (2**63 - 1), derive_seed(purpose)])
