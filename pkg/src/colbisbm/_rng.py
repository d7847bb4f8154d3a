"""Counter-based seed derivation so subtasks get independent, order-free streams."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_seed(root: int, *keys) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *(_key(k) for k in keys)])
    return int(ss.generate_state(1)[0])


def derive_rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
