"""Named deterministic RNG streams.

Each pipeline stage draws from its own generator, seeded by hashing the
run seed together with the stage name. Stages therefore never perturb
each other's randomness, and adding draws to one stage leaves every
other stage bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for one named stage of a seeded run."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
