"""Named random sub-streams derived from a single integer seed."""

import numpy as np

STREAMS = {"init": 0, "dropout": 1, "split": 2, "synthetic": 3, "tests": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` under ``seed``."""
    return np.random.default_rng([int(seed), STREAMS[name]])
