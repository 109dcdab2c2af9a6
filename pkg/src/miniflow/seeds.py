"""One logical rng stream per concern, derived from the master seed.

Fixed labels keep sweep cells comparable: changing the supervision config
must never shift the draws that initialize the model or drive the data.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "model-init": 1,
    "proj-init": 2,
    "train": 3,
    "sample": 4,
    "dataset-prototypes": 5,
    "dataset-jitter": 6,
    "dataset-text": 7,
    "dataset-split": 8,
    "teacher": 9,
}


def derive_rng(seed: int, label: str, *extra: int) -> np.random.Generator:
    if label not in STREAMS:
        raise KeyError(f"unknown rng stream label {label!r}")
    key = (STREAMS[label],) + tuple(int(x) for x in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def derive_seed(seed: int, label: str, *extra: int) -> int:
    """A scalar child seed (for components that take ints, not generators)."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=(STREAMS[label],) + tuple(int(x) for x in extra))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
