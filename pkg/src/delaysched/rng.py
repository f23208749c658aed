"""Per-run random streams.

Every run owns a master seed. Independent consumers draw from child streams
keyed by a fixed tag, so the scheduler's randomness never depends on how
many draws the learner made (and vice versa).
"""

import numpy as np

SCHEDULER = 0
LEARNER = 1
INSTANCE = 2


def stream(master_seed, tag):
    """Generator for ``(master_seed, tag)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(tag),)))


def run_seed(base_seed, index):
    """Master seed of the ``index``-th run of an experiment with ``base_seed``.

    A counter-based split: distinct indices give unrelated 64-bit seeds.
    """
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
