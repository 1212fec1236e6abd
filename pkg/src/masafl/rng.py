"""Deterministic RNG derivation.

Every stochastic operation in the package draws from a Generator derived
from an integer key path, so results never depend on call order or worker
count. Key paths are (master_seed, context_tag, *indices).
"""

from __future__ import annotations

import numpy as np

# Context tags for seed derivation. Values are arbitrary but frozen:
# changing them changes every downstream random stream.
DATA = 1
TEST = 2
PARTITION = 3
POISON = 4
PROXY = 5
INIT = 6
SAMPLE = 7
ROUND = 8
MASA = 9
TEMPLATE = 10


def child_rng(*keys: int) -> np.random.Generator:
    """Return a Generator keyed by the given integer path."""
    return np.random.default_rng(np.random.SeedSequence(list(keys)))
