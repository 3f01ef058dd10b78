"""Deterministic RNG stream derivation.

All randomness in a run is derived from one master seed plus a slash-joined
path naming the consumer (e.g. ``"unlearn/scrub/minority/keep"``). Streams
are independent, stable across platforms (the path is hashed with SHA-256),
and independent of execution order, so parallel and serial runs of the same
configuration draw identical numbers.
"""

import hashlib

import numpy as np


def derive_seed_sequence(master_seed: int, *path: str) -> np.random.SeedSequence:
    digest = hashlib.sha256("/".join(path).encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, *words.tolist()])


def derive_rng(master_seed: int, *path: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(master_seed, *path))


def derive_int_seed(master_seed: int, *path: str) -> int:
    """A plain integer seed for components that take one (e.g. init_seed)."""
    return int(derive_seed_sequence(master_seed, *path).generate_state(1)[0])
