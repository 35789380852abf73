"""Named, order-independent random streams derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key parts must be non-negative, got {part}")
    return int(part)


def seed_sequence(seed: int, *names: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_key(n) for n in names)])


def stream(seed: int, *names: int | str) -> np.random.Generator:
    """Generator for the sub-stream ``names`` of ``seed``.

    Streams with different names are statistically independent, and the
    result does not depend on how many other streams were drawn before.
    """
    return np.random.default_rng(seed_sequence(seed, *names))


def derive_seed(seed: int, *names: int | str) -> int:
    return int(seed_sequence(seed, *names).generate_state(1, dtype=np.uint64)[0])
