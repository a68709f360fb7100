"""Named random streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream_key", "derive_rng"]


def stream_key(component: str) -> int:
    """Stable 32-bit key of a component name (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.sha256(component.encode()).digest()[:4], "little")


def derive_rng(master_seed: int, component: str, *ids: int) -> np.random.Generator:
    """Generator that is a pure function of (master seed, component name, ids)."""
    key = (stream_key(component), *(int(i) for i in ids))
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=key))
