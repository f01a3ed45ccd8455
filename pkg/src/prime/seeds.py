"""Derived, schedule-independent random streams.

Every stochastic decision draws from a Generator keyed by the run seed plus
stable context keys (epoch, patient index, view, ...), so results do not
depend on batch order or parallel scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    h = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(h[:4], "little")


def derive_rng(root_seed: int, *keys) -> np.random.Generator:
    entropy = [int(root_seed) & 0xFFFFFFFF] + [_key_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(root_seed: int, *keys) -> int:
    entropy = [int(root_seed) & 0xFFFFFFFF] + [_key_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
