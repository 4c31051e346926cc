"""Seed derivation.

Every random stream in a run is keyed by a path of small integers hanging off
the master seed, e.g. ``derive_seed(master, CLIENT, k, ROUND, t)``. Mixing uses
the splitmix64 finalizer so the mapping is identical on every platform.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1

# stream tags
BACKBONE = 1
PUBLIC = 2
CLIENT = 3
ROUND = 4
EVAL = 5
TEACHER = 6
TRAIN_DATA = 7
BATCH = 8
PROBE = 9
INSTANCE = 10
EMBED = 11
PRETRAIN = 12


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    state = splitmix64(int(master) & _MASK)
    for key in path:
        state = splitmix64(state ^ (int(key) & _MASK))
    return state


def rng(master: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))
