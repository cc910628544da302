"""Deterministic random-number streams.

Every stochastic quantity in the package draws from a counter-based Philox
generator keyed by (master seed, stream path).  Streams for distinct paths are
statistically independent and collision-free, so samples, sites and purposes
can be dealt out across worker processes in any order without coordination.
"""

import numpy as np

# Purpose tags for stream paths (first component after the master seed).
DISORDER = 1
PATH = 2
INIT_STATE = 3
PROBE = 4


def stream(master_seed, *path):
    """Return a Generator for the given (master_seed, *path) stream.

    Identical arguments always give an identical stream; any change to the
    path gives an independent one.
    """
    if master_seed < 0:
        raise ValueError("master seed must be a nonnegative integer")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
