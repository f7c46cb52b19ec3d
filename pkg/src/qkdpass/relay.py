"""Trusted-relay key exchange and one-time-pad messaging between stations.

The satellite holds one secure key per ground station (MJ with the first
station, MN with the second), publishes their XOR, and the second station
recovers MJ by XORing again with MN.  Key material is strictly one-time: a
consumption ledger advances a per-key offset and no byte is ever served
twice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Tuple


class KeyExhaustedError(RuntimeError):
    """Requested more key material than remains unconsumed."""


@dataclass
class StationKey:
    """A final secure key block held by one station, with one-time ledger."""

    station_id: str
    key_bits: bytes
    pass_id: int
    consumed_offset: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.consumed_offset <= self.bit_length):
            raise ValueError("consumed_offset out of range")

    @property
    def bit_length(self) -> int:
        return 8 * len(self.key_bits)

    @property
    def remaining_bits(self) -> int:
        return self.bit_length - self.consumed_offset

    def draw(self, nbits: int) -> bytes:
        """Consume `nbits` (rounded up to whole bytes) of fresh key."""
        if nbits <= 0:
            return b""
        if self.consumed_offset % 8 != 0:
            raise ValueError("ledger offset must stay byte aligned")
        nbytes = (nbits + 7) // 8
        start = self.consumed_offset // 8
        if 8 * (start + nbytes) > self.bit_length:
            raise KeyExhaustedError(
                f"{self.station_id}: need {nbits} bits, {self.remaining_bits} remain"
            )
        out = self.key_bits[start : start + nbytes]
        self.consumed_offset += 8 * nbytes
        return out


def xor_bytes(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def relay_combine(mj: StationKey, mn: StationKey) -> Tuple[bytes, int]:
    """Satellite-side XOR of the two station keys.

    Unequal lengths are truncated to the shorter key; returns the combined
    string and the number of bits truncated from the longer one.  Both
    ledgers advance.
    """
    n_bits = min(mj.remaining_bits, mn.remaining_bits)
    if n_bits == 0:
        raise KeyExhaustedError("no key material to combine")
    truncated = max(mj.remaining_bits, mn.remaining_bits) - n_bits
    a = mj.draw(n_bits)
    b = mn.draw(n_bits)
    return xor_bytes(a, b), truncated


def recover_key(combined: bytes, mn: StationKey) -> bytes:
    """Station-side recovery: (MN xor MJ) xor MN = MJ; consumes MN."""
    if len(combined) == 0:
        raise ValueError("combined key string is empty")
    b = mn.draw(8 * len(combined))
    return xor_bytes(combined, b)


def otp_encrypt(message: bytes, key: StationKey) -> bytes:
    """One-time-pad encryption; refuses rather than reuse key material."""
    if len(message) == 0:
        return b""
    if 8 * len(message) > key.remaining_bits:
        raise KeyExhaustedError(
            f"message needs {8 * len(message)} bits, {key.remaining_bits} remain"
        )
    pad = key.draw(8 * len(message))
    return xor_bytes(message, pad)


def otp_decrypt(ciphertext: bytes, key: StationKey) -> bytes:
    return otp_encrypt(ciphertext, key)


def export_aes_seeds(key: StationKey, count: int) -> list:
    """Hand out 128-bit seed blocks for an external block cipher.

    The cipher itself is out of scope; this just consumes and returns the
    seed material under the one-time ledger.
    """
    return [key.draw(128) for _ in range(count)]


def relay_transcript(
    orbit_a: int,
    orbit_b: int,
    bits_relayed: int,
    pass_time_a: float,
    pass_time_b: float,
    truncated_bits: int = 0,
) -> Dict[str, object]:
    """Relay summary; latency is computed from the two pass timestamps."""
    return {
        "orbit_a": orbit_a,
        "orbit_b": orbit_b,
        "bits_relayed": bits_relayed,
        "truncated_bits": truncated_bits,
        "latency_s": abs(pass_time_b - pass_time_a),
    }


def write_transcript(path, transcript: Dict[str, object]) -> None:
    with open(path, "w") as fh:
        json.dump(transcript, fh, indent=2, sort_keys=True)
        fh.write("\n")
