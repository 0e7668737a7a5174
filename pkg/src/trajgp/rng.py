"""Deterministic random streams derived from one run seed.

Each module draws from its own counter-based Philox stream, keyed by a fixed
registry id, so adding a consumer never perturbs the streams of the others.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids; append only, never renumber.
STREAMS = {
    "synthetic": 1,
    "split": 2,
    "extractor_init": 3,
    "inducing_init": 4,
    "train_shuffle": 5,
    "dropout": 6,
    "kmeans": 7,
    "gmm": 8,
    "stability": 9,
    "permutation": 10,
    "clustering_sample": 11,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named module stream under ``seed``.

    ``extra`` integers split a stream further (e.g. one sub-stream per epoch)
    without consuming state from sibling streams.
    """
    try:
        key = STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown rng stream '{name}'") from None
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(key, *extra))
    return np.random.Generator(np.random.Philox(seq))
