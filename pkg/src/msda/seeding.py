"""Deterministic seed derivation shared by data shuffles and model init."""
from __future__ import annotations

import hashlib
import random


def stable_hash64(*parts: object) -> int:
    """Hash repr-able parts to a stable 64-bit integer.

    Python's builtin ``hash`` is salted per process; run-to-run
    reproducibility of schedules and initializations depends on this one
    being stable across runs and platforms.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def stable_seed(*parts: object) -> int:
    """Non-negative 63-bit seed usable by both ``random`` and torch."""
    return stable_hash64(*parts) & 0x7FFF_FFFF_FFFF_FFFF


def stable_rng(*parts: object) -> random.Random:
    return random.Random(stable_seed(*parts))
