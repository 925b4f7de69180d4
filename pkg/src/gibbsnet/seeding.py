"""Counter-based random streams.

Every random draw in the package comes from ``stream(seed, *keys)``; the
keys name the purpose of the draw (and the chain step or iteration), so any
draw can be regenerated without replaying the ones before it.
"""

import numpy as np

PRIOR = 1
DECODER = 2
ENCODER = 3
CLAMPED = 4
BATCH = 5
INIT = 6
LABELS = 7
INPAINT = 8
EVAL = 9
DATA = 10


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def derive(seed: int, *keys: int) -> int:
    """A 63-bit child seed for the given keys."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
