"""Named, independent random streams derived from a single session seed."""

import numpy as np

# stable spawn keys; never renumber
INIT = 1
SHUFFLE = 2
BLIND = 3
KEY = 4
ENCRYPT = 5
DP_NOISE = 6
SPLIT = 7
DATA = 8
LABELS = 9


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(keys)))
