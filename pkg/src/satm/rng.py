"""Seed derivation.

Every random stream is obtained from a single 64-bit root seed plus a tuple
of purpose strings/ints, e.g. ``generator(root, "condense", "noise", 17)``.
The purpose tuple is hashed with BLAKE2b into a 128-bit spawn key for
:class:`numpy.random.SeedSequence`, so streams for different purposes are
independent and adding a new purpose never shifts an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "generator"]


def _purpose_key(purpose) -> tuple[int, ...]:
    text = "\x1f".join(str(p) for p in purpose).encode("utf-8")
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def _sequence(root: int, purpose) -> np.random.SeedSequence:
    if root < 0 or root >= 2**64:
        raise ValueError(f"root seed must fit in 64 unsigned bits, got {root}")
    return np.random.SeedSequence(entropy=int(root), spawn_key=_purpose_key(purpose))


def derive_seed(root: int, *purpose) -> int:
    """Return a 64-bit integer seed for ``purpose`` under ``root``."""
    state = _sequence(root, purpose).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def generator(root: int, *purpose) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_sequence(root, purpose)))
