"""Deterministic seed derivation for independent PRNG streams.

Every random draw in the pipeline comes from a stream derived as a stable
hash of the master seed plus string/int context parts, so results are
independent of scheduling order and reproducible across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *parts)))
