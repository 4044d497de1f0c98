"""Seedable counter-based random streams.

Every stochastic routine takes an explicit numpy Generator. Streams are
derived from (seed, *labels) so a rollout, a batch sampler, and an init
each own an independent stream and replaying any one of them is exact.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError

# Philox is the counter-based algorithm; the config names it explicitly so
# a checkpointed run records what produced its draws.
ALGORITHMS = ("philox",)


def _mix(labels: tuple) -> int:
    """Fold string/int labels into a stable 64-bit stream key."""
    h = 0x9E3779B97F4A7C15
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            word = int(lab) & 0xFFFFFFFFFFFFFFFF
        else:
            word = zlib.crc32(str(lab).encode("utf-8"))
        h ^= word
        h = (h * 0xBF58476D1CE4E5B9 + 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return h


def stream(seed: int, *labels, algorithm: str = "philox") -> np.random.Generator:
    """Independent generator for (seed, labels). Same args -> same bits."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown rng algorithm {algorithm!r}; supported: {ALGORITHMS}")
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, _mix(labels)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
