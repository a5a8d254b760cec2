"""Stable seed derivation so every phase owns an independent RNG stream."""
from __future__ import annotations

import hashlib


def derive_seed(seed: int, *parts) -> int:
    """Hash (seed, *parts) into a sub-seed; stable across processes and runs."""
    key = "|".join([str(int(seed)), *[str(p) for p in parts]])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)
