"""Deterministic random streams derived from one master seed.

Every consumer of randomness asks for a named substream.  Substreams are
independent of each other and of the order in which they are created, so
concurrent replicas and reordered phases reproduce bit-identical results.
"""

from __future__ import annotations

import numpy as np

# Fixed tags keep substreams disjoint without any global registry.
STREAM_TAGS = {
    "pdn-noise": 1,
    "process-variation": 2,
    "hiding": 3,
    "plaintexts": 4,
    "measurement-noise": 5,
}


def substream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a generator for the named substream of ``master_seed``.

    Extra ``indices`` (replica number, trace number, interval number...)
    select disjoint child streams within the named stream.
    """
    if name not in STREAM_TAGS:
        raise KeyError(f"unknown random substream {name!r}")
    entropy = (int(master_seed), STREAM_TAGS[name]) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy))
