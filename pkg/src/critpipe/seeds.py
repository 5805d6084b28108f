"""Deterministic seed derivation.

All stochastic behavior in scripted/simulated pipelines flows through seeds
derived here, so a (global seed, config) pair fully determines every artifact.
Python's built-in hash() is salted per process and must never be used.
"""

from __future__ import annotations

import hashlib
import random

_SEP = "\x1f"


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from an ordered tuple of stringable parts."""
    material = _SEP.join(str(p) for p in parts)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(*parts: object) -> random.Random:
    """Fresh RNG seeded from derive_seed(*parts)."""
    return random.Random(derive_seed(*parts))
