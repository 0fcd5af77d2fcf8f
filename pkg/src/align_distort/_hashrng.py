"""Counter-based random numbers.

Every draw is a pure function of (seed, stream, user, slot), so a sampler
can process users in any order or chunking and still reproduce the same
bits.  The mixer is the SplitMix64 finalizer, vectorized over uint64.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


def mix64(value: int) -> int:
    """Scalar SplitMix64 finalizer on a Python int (taken mod 2**64)."""
    return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, *keys: int) -> int:
    """Hash a seed together with integer keys into a fresh 64-bit seed."""
    h = mix64(seed)
    for k in keys:
        h = mix64((h + (k & _MASK64) * 0x9E3779B97F4A7C15) & _MASK64)
    return h


def stream_key(seed: int, stream: int) -> np.uint64:
    return np.uint64(derive_seed(seed, 0x5EED, stream))


def uniforms(key: np.uint64, user: np.ndarray, slot: np.ndarray) -> np.ndarray:
    """Uniform doubles in [0, 1) for broadcast arrays of (user, slot) counters."""
    user = np.asarray(user, dtype=np.uint64)
    slot = np.asarray(slot, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(user * _GOLDEN + key)
        h = _mix(h + slot * _GOLDEN + _M1)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
