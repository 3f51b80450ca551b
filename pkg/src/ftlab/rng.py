"""Counter-based, splittable random streams.

Every random draw in the package comes from a Philox generator keyed by a
tuple of non-negative integers.  Path ``i`` of an ensemble seeded with
``base`` uses the stream ``(base, i)``, so results never depend on the order
(or thread) in which paths are generated.
"""

from __future__ import annotations

from typing import Iterable, Union

import numpy as np

SeedLike = Union[int, Iterable[int]]


def seed_key(seed: SeedLike) -> tuple[int, ...]:
    """Normalize an int or int sequence to a non-empty tuple of ints."""
    if isinstance(seed, (int, np.integer)):
        key = (int(seed),)
    else:
        key = tuple(int(s) for s in seed)
    if not key:
        raise ValueError("seed must contain at least one integer")
    if any(k < 0 for k in key):
        raise ValueError(f"seed entries must be non-negative, got {key}")
    return key


def stream(seed: SeedLike, *extra: int) -> np.random.Generator:
    """Return the generator for the stream ``(*seed, *extra)``."""
    key = seed_key(seed) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(entropy=key[0], spawn_key=key[1:])
    return np.random.Generator(np.random.Philox(ss))


def child(seed: SeedLike, *extra: int) -> tuple[int, ...]:
    """Key of a sub-stream, for passing to functions that take a seed."""
    return seed_key(seed) + tuple(int(e) for e in extra)
