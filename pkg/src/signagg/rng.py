"""Deterministic random-stream derivation.

A whole run is a pure function of (config, master seed).  Every consumer of
randomness gets its own named stream derived from the master seed through
``SeedSequence(seed, spawn_key=path)``; distinct paths yield statistically
independent PCG64 streams that never interleave, so adding draws to one
consumer cannot shift any other consumer's values.

Stream paths used by the package (first component = consumer id):

* (INIT,)                 posterior / network initialisation
* (SHUFFLE, epoch)        minibatch order for one epoch
* (PATHS, epoch)          activation-path and weight sampling while training
* (EVAL, epoch, part)     evaluation sampling; part 0 = train split, 1 = test
* (DATA, k)               synthetic dataset generation
"""

import numpy as np

INIT = 0
SHUFFLE = 1
PATHS = 2
EVAL = 3
DATA = 4


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent Generator for consumer ``path`` under master ``seed``."""
    key = tuple(int(p) for p in path)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
