"""Deterministic sub-seed derivation."""

import numpy as np

# Purpose tags, so that independent draws never share a stream.
TAG_TASK = 1
TAG_PARTITION = 2
TAG_ADAPTER = 3
TAG_LORA = 4
TAG_SAMPLING = 5
TAG_SHUFFLE = 6
TAG_BASIS_L = 7
TAG_BASIS_R = 8
TAG_A_INIT = 9


def derive_seed(*keys: int) -> int:
    """Map a tuple of non-negative integers to an independent 63-bit seed."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))
