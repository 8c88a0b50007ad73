"""Reproducible random streams.

Every random draw in the package comes from a Philox (counter-based)
generator keyed by a master seed and a tuple of integer indices, e.g.
``(mc_rep, stream_id, bootstrap_rep)``. A stream therefore depends only on
its indices, never on the order in which workers ask for it.
"""

from __future__ import annotations

import numpy as np

# stream ids
SIMULATE = 0
BOOT_IID = 1
BOOT_WEIGHTED = 2
MULTISTART = 3
PSEUDO_TRUE = 4
BOOT_HH = 5


def stream(seed: int, *indices: int) -> np.random.Generator:
    """Return the generator for ``(seed, *indices)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for a nested stream family."""
    return int(rng.integers(0, 2**63 - 1))
