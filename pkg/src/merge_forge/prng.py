"""Portable per-tensor random streams for drop-and-rescale masks.

Each tensor gets its own SplitMix64 stream seeded from a hash of the model id
and tensor name, so masks do not depend on iteration order or thread count.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def tensor_seed(model_id: str, tensor_name: str, global_seed: int) -> int:
    key = model_id.encode("utf-8") + b"\x00" + tensor_name.encode("utf-8")
    return fnv1a64(key) ^ (int(global_seed) & MASK64)


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 started from ``state``, as uint64."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(state & MASK64) + steps * np.uint64(GOLDEN_GAMMA)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def uniforms(state: int, n: int) -> np.ndarray:
    """Uniform doubles in [0, 1) with 53 random bits each."""
    return (splitmix64(state, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def keep_mask(model_id: str, tensor_name: str, global_seed: int, n: int, density: float) -> np.ndarray:
    """Boolean keep-mask over ``n`` row-major elements: element i kept iff u_i < density."""
    return uniforms(tensor_seed(model_id, tensor_name, global_seed), n) < density
