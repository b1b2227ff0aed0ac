"""Counter-based random streams keyed by (seed, *keys)."""

import numpy as np


def stream(seed, *keys):
    """Return a Philox generator keyed by ``seed`` and any number of integer keys.

    Streams for different keys are statistically independent, and the same
    key tuple always yields the same stream regardless of call order or
    thread layout.
    """
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def int_seed(seed, *keys):
    """Derive a 31-bit integer seed (for numba's legacy generator)."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0] & 0x7FFFFFFF)
