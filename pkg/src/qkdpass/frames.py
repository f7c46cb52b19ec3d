"""Classical duplex-channel frame codec.

Wire format (big endian): 1-byte type, 8-byte session id, 4-byte sequence,
4-byte payload length, payload, 4-byte CRC-32 of the payload (polynomial
0x04C11DB7, reflected, init 0xFFFFFFFF - i.e. the zlib CRC), then an
optional 16-byte authentication tag whose presence is flagged in the type
byte's high bit.  The two privacy-amplification frame types must be signed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

TYPE_ORIGINAL_KEY_INFO = 0x01
TYPE_BASIS_COMPARISON = 0x02
TYPE_PA_INSTRUCTION = 0x03
TYPE_PA_FEEDBACK = 0x04

FRAME_TYPES = {
    TYPE_ORIGINAL_KEY_INFO,
    TYPE_BASIS_COMPARISON,
    TYPE_PA_INSTRUCTION,
    TYPE_PA_FEEDBACK,
}
SIGNED_TYPES = {TYPE_PA_INSTRUCTION, TYPE_PA_FEEDBACK}

_SIGNED_FLAG = 0x80
_HEADER = struct.Struct(">BQII")
TAG_BYTES = 16


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    frame_type: int
    session_id: int
    sequence: int
    payload: bytes
    signature: Optional[bytes] = None

    def __post_init__(self) -> None:
        if self.frame_type not in FRAME_TYPES:
            raise FrameError(f"unknown frame type {self.frame_type:#x}")
        if self.frame_type in SIGNED_TYPES and self.signature is None:
            raise FrameError("PA frames must carry a signature")
        if self.signature is not None and len(self.signature) != TAG_BYTES:
            raise FrameError("signature must be 16 bytes")


def signed_bytes(frame: Frame) -> bytes:
    """Header and payload bytes covered by the authentication tag."""
    return _HEADER.pack(frame.frame_type, frame.session_id, frame.sequence, len(frame.payload)) + frame.payload


def encode_frame(frame: Frame) -> bytes:
    type_byte = frame.frame_type | (_SIGNED_FLAG if frame.signature is not None else 0)
    head = _HEADER.pack(type_byte, frame.session_id, frame.sequence, len(frame.payload))
    crc = zlib.crc32(frame.payload) & 0xFFFFFFFF
    out = head + frame.payload + struct.pack(">I", crc)
    if frame.signature is not None:
        out += frame.signature
    return out


def decode_frame(data: bytes) -> Frame:
    if len(data) < _HEADER.size + 4:
        raise FrameError("frame too short")
    type_byte, session_id, sequence, length = _HEADER.unpack_from(data)
    signed = bool(type_byte & _SIGNED_FLAG)
    frame_type = type_byte & 0x7F
    if frame_type not in FRAME_TYPES:
        raise FrameError(f"unknown frame type {frame_type:#x}")
    expected = _HEADER.size + length + 4 + (TAG_BYTES if signed else 0)
    if len(data) != expected:
        raise FrameError("frame length mismatch")
    payload = data[_HEADER.size : _HEADER.size + length]
    (crc,) = struct.unpack_from(">I", data, _HEADER.size + length)
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise FrameError("payload CRC mismatch")
    signature = data[-TAG_BYTES:] if signed else None
    if frame_type in SIGNED_TYPES and not signed:
        raise FrameError("PA frame without signature")
    return Frame(frame_type, session_id, sequence, payload, signature)
