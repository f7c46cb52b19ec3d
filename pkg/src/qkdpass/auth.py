"""Information-theoretic one-time message authentication.

Tags are a polynomial-evaluation universal hash over GF(2^127 - 1), one-time
padded with fresh pre-shared key material: tag = (poly(msg)(r) + pad) mod p.
The evaluation point r is fixed per pool (per direction of one session);
every message index consumes a fresh 128-bit pad, and a usage ledger refuses
to sign a second distinct message at an index that already carries a tag.
"""

from __future__ import annotations

import hashlib
import hmac
from typing import Dict, Optional

PRIME = (1 << 127) - 1
TAG_BYTES = 16
TAG_BITS = TAG_BYTES * 8
_CHUNK = 15  # 120-bit coefficients keep every chunk below the modulus


class KeyExhausted(RuntimeError):
    pass


class KeyReuseError(RuntimeError):
    pass


def _poly_eval(data: bytes, point: int) -> int:
    # Length-prefixed Horner evaluation; the prefix stops extension collisions.
    acc = len(data) % PRIME
    for i in range(0, len(data), _CHUNK):
        acc = (acc * point + int.from_bytes(data[i : i + _CHUNK], "big")) % PRIME
    return acc


def make_tag(data: bytes, point: int, pad: int) -> bytes:
    t = (_poly_eval(data, point) + pad) % PRIME
    return t.to_bytes(TAG_BYTES, "big")


def verify_tag(data: bytes, tag: bytes, point: int, pad: int) -> bool:
    return hmac.compare_digest(make_tag(data, point, pad), tag)


def expand_pool(secret: bytes, n_messages: int) -> bytes:
    """Stretch a bootstrap secret into a pool for one direction.

    Stands in for pre-shared key material; replenishment from produced key
    just appends more pad slots.
    """
    need = TAG_BYTES * (n_messages + 1)
    return hashlib.shake_256(secret).digest(need)


class OneTimeAuthenticator:
    """Signer/verifier for one direction, with a one-time usage ledger."""

    def __init__(self, pool: bytes):
        if len(pool) < 2 * TAG_BYTES:
            raise ValueError("pool must hold at least the point and one pad")
        self._point = (int.from_bytes(pool[:TAG_BYTES], "big") % (PRIME - 1)) + 1
        self._pads = pool[TAG_BYTES:]
        self._ledger: Dict[int, bytes] = {}

    @property
    def capacity(self) -> int:
        return len(self._pads) // TAG_BYTES

    def _pad(self, index: int) -> int:
        if index < 0 or (index + 1) * TAG_BYTES > len(self._pads):
            raise KeyExhausted(f"no pad material for message index {index}")
        return int.from_bytes(self._pads[index * TAG_BYTES : (index + 1) * TAG_BYTES], "big") % PRIME

    def sign(self, index: int, data: bytes) -> bytes:
        digest = hashlib.blake2b(data, digest_size=16).digest()
        seen = self._ledger.get(index)
        if seen is not None and seen != digest:
            raise KeyReuseError(f"pad index {index} already used for a different message")
        pad = self._pad(index)
        self._ledger[index] = digest
        return make_tag(data, self._point, pad)

    def verify(self, index: int, data: bytes, tag: bytes) -> bool:
        try:
            pad = self._pad(index)
        except KeyExhausted:
            return False
        return verify_tag(data, tag, self._point, pad)

    def consumed_bits(self) -> int:
        """Pad bits consumed so far (the evaluation point is amortised)."""
        return TAG_BITS * len(self._ledger)
