"""Deterministic counter-based randomness.

Every draw is a pure function of a 64-bit stream key and a counter, so any
slice of any stream can be evaluated independently and in parallel without
changing the result.  This is what lets the satellite side re-derive pulse
records at arbitrary sequence numbers without materialising the stream, and
lets chunked Monte-Carlo runs stay bit-identical to serial ones.

The mixer is the splitmix64 finaliser over ``counter * GAMMA + key``.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0**-53)


def derive_key(seed: int, *labels: object) -> int:
    """Derive an independent 64-bit stream key from a seed and labels.

    Labels are hashed, not concatenated, so ``derive_key(s, "a", 1)`` and
    ``derive_key(s, "a1")`` are unrelated streams.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<q", int(seed) & (_MASK64 >> 1)))
    for label in labels:
        h.update(str(label).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _finalize(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_u64(key: int, counters) -> np.ndarray:
    """Vectorised uniform uint64 draws at the given counters."""
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _finalize(c * _GAMMA + np.uint64(key & _MASK64))


def uniform(key: int, counters) -> np.ndarray:
    """Uniform float64 in [0, 1) at the given counters."""
    return (hash_u64(key, counters) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def bits(key: int, counters) -> np.ndarray:
    """Uniform {0,1} uint8 at the given counters."""
    return (hash_u64(key, counters) >> np.uint64(63)).astype(np.uint8)


def byte_stream(key: int, nbytes: int) -> bytes:
    """First `nbytes` of the keyed byte stream (counter-indexed words)."""
    nwords = (nbytes + 7) // 8
    words = hash_u64(key, np.arange(nwords, dtype=np.uint64))
    return words.astype("<u8").tobytes()[:nbytes]
