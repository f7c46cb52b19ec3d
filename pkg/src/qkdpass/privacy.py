"""Toeplitz-hashing privacy amplification.

The final key is T @ x over GF(2) where T is a final_length x block_size
Toeplitz matrix whose diagonals are a SHAKE-256 keystream expanded from the
shared hash seed.  The product is computed as one binary convolution via a
real FFT; integer convolution values stay far below 2^53, so rounding back
to integers before the parity reduction is exact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def expand_hash_seed(seed: bytes, nbits: int) -> np.ndarray:
    """Deterministic bit expansion of the shared seed (uint8 0/1 array)."""
    if nbits <= 0:
        return np.zeros(0, dtype=np.uint8)
    raw = hashlib.shake_256(seed).digest((nbits + 7) // 8)
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:nbits]


def toeplitz_hash(bits: np.ndarray, seed: bytes, output_len: int) -> np.ndarray:
    """Hash `bits` (uint8 0/1) down to `output_len` bits."""
    x = np.asarray(bits, dtype=np.uint8)
    n = len(x)
    m = int(output_len)
    if m <= 0:
        return np.zeros(0, dtype=np.uint8)
    if m > n:
        raise ValueError("output length exceeds input block size")
    diag = expand_hash_seed(seed, n + m - 1).astype(np.float64)

    size = 1
    while size < 2 * n + m - 1:
        size <<= 1
    conv = np.fft.irfft(np.fft.rfft(diag, size) * np.fft.rfft(x.astype(np.float64), size), size)
    window = conv[n - 1 : n - 1 + m]
    rounded = np.rint(window)
    if np.max(np.abs(window - rounded)) > 0.25:
        raise ArithmeticError("FFT convolution lost integer precision")
    return (rounded.astype(np.int64) & 1).astype(np.uint8)


def pack_key_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_key_bits(data: bytes, nbits: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits]
