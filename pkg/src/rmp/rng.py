"""Counter-based random streams.

Every run draws from ``Philox`` keyed by a ``SeedSequence`` built from the
run seed plus optional stream indices, so a sweep gives identical numbers no
matter how its tasks are scheduled.
"""
from __future__ import annotations

import numpy as np

RNG_ID = "numpy.random.Philox(4x64-10)/SeedSequence"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))
