"""Stable seed derivation so concurrent runs stay reproducible.

Worker scheduling must never change results: every independent unit of
work (a query, a Monte Carlo partition) gets its own generator derived
from the run seed plus a stable key, rather than sharing one stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derived_rng"]

_MASK_63 = (1 << 63) - 1


def derive_seed(seed: int, *keys) -> int:
    """Mix ``seed`` with string/int keys into a stable 63-bit seed.

    Uses SHA-256 rather than ``hash()`` because the latter is salted per
    process for strings.
    """
    h = hashlib.sha256(str(int(seed)).encode("ascii"))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") & _MASK_63


def derived_rng(seed: int, *keys) -> np.random.Generator:
    """A fresh generator for the work unit identified by ``keys``."""
    return np.random.default_rng(derive_seed(seed, *keys))
