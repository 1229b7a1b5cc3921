"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``SeedSequence([seed, purpose, index])``.  A member's stream therefore
depends only on the master seed, the purpose tag and the member index, never
on ensemble size, block length or evaluation order.  This derivation is part
of the serialization contract: changing it changes every stochastic output.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

NOISE = 0
EPSILON = 1
CONTROL = 2
GRID = 3
PATH = 4

_SEED_LIMIT = 2**64


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < _SEED_LIMIT:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, index)``."""
    ss = np.random.SeedSequence([check_seed(seed), int(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def member_streams(seed: int, purpose: int, count: int) -> list[np.random.Generator]:
    return [stream(seed, purpose, i) for i in range(count)]


def child_seed(seed: int, purpose: int, index: int) -> int:
    """Derive an independent 64-bit master seed, e.g. for one grid point."""
    ss = np.random.SeedSequence([check_seed(seed), int(purpose), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])
