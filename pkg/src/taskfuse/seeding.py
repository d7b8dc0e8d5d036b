"""Deterministic seed substreams derived from one global seed.

Every source of randomness in a run is keyed by ``(global_seed, label)``
so that changing one stage (say, the Fisher batch) never perturbs the
random draws of another (say, per-task training).
"""

from __future__ import annotations

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Map (seed, label) to an independent nonnegative child seed."""
    if seed < 0:
        raise ValueError(f"global seed must be nonnegative, got {seed}")
    ss = np.random.SeedSequence([seed, *label.encode("utf-8")])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def spawn_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for the named substream of the global seed."""
    return np.random.default_rng(derive_seed(seed, label))
