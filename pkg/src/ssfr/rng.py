"""Independent random streams derived from one run seed.

Each consumer gets a Philox generator keyed by ``(seed, consumer id)``, so
adding a new consumer never shifts the draws seen by an existing one.
"""

from __future__ import annotations

import numpy as np

CONSUMERS = {
    "simulate_states": 1,
    "simulate_yields": 2,
    "optimizer_starts": 3,
}


def stream(seed: int, consumer: str) -> np.random.Generator:
    if consumer not in CONSUMERS:
        raise KeyError(f"unknown random stream consumer {consumer!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(CONSUMERS[consumer],))
    return np.random.Generator(np.random.Philox(ss))
