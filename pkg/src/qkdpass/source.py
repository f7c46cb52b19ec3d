"""Decoy-state BB84 pulse preparation.

The transmitter interleaves five sources: vacuum ``o``, decoy ``x1``/``x2``
and signal ``y1``/``y2`` (X and Z encodings of the decoy and signal
intensities).  Pulse records are a pure function of (seed, sequence number),
so the stream can be regenerated on demand at any scale; `prepare_pulses`
just materialises a contiguous window of it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng

# Source class codes.  x1/y1 encode in the X basis, x2/y2 in the Z basis;
# the vacuum class carries a basis label (used for sifting bookkeeping) but
# no key bit.
CLASS_O, CLASS_X1, CLASS_Y1, CLASS_X2, CLASS_Y2 = range(5)
CLASS_NAMES = ("o", "x1", "y1", "x2", "y2")
BASIS_Z, BASIS_X = 0, 1
NO_BIT = -1

_CLASS_BASIS = np.array([NO_BIT, BASIS_X, BASIS_X, BASIS_Z, BASIS_Z], dtype=np.int8)


def intrinsic_error_prob(contrast_db: float) -> float:
    """Bit-flip probability implied by a polarization contrast ratio in dB.

    A contrast of C dB means the wrong detector sees 10^(-C/10) of the
    light, so the flip probability is 1/(1 + 10^(C/10)).  0 dB gives 0.5
    (no polarization information), infinite contrast gives 0.
    """
    if contrast_db < 0:
        raise ValueError("contrast_db must be >= 0")
    return 1.0 / (1.0 + 10.0 ** (contrast_db / 10.0))


@dataclass(frozen=True)
class SourceParams:
    """Intensities and class probabilities of the five-source transmitter."""

    mu: float = 0.8
    nu: float = 0.1
    w: float = 0.001
    p_signal: float = 0.5
    p_decoy: float = 0.25
    p_vacuum: float = 0.25
    intrinsic_contrast_db: float = 25.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.w < self.nu < self.mu):
            raise ValueError("intensities must satisfy 0 <= w < nu < mu")
        probs = (self.p_signal, self.p_decoy, self.p_vacuum)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("class probabilities must be >= 0 and sum to 1")
        if self.intrinsic_contrast_db <= 0:
            raise ValueError("intrinsic_contrast_db must be > 0")

    def class_probabilities(self) -> np.ndarray:
        """Per-class probabilities in CLASS_* order (o, x1, y1, x2, y2)."""
        return np.array(
            [
                self.p_vacuum,
                self.p_decoy / 2.0,
                self.p_signal / 2.0,
                self.p_decoy / 2.0,
                self.p_signal / 2.0,
            ]
        )

    def class_intensities(self) -> np.ndarray:
        return np.array([self.w, self.nu, self.mu, self.nu, self.mu])

    @property
    def e_intrinsic(self) -> float:
        return intrinsic_error_prob(self.intrinsic_contrast_db)

    @property
    def mean_intensity(self) -> float:
        return float(self.class_probabilities() @ self.class_intensities())


@dataclass(frozen=True)
class PulseRecord:
    """One prepared pulse; vacuum-class records carry no bit."""

    sequence_number: int
    basis: int
    bit: Optional[int]
    source_class: int

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.source_class]


class PulseBlock:
    """Struct-of-arrays view of a contiguous pulse window.

    `bit` is int8 with -1 meaning "no bit" (vacuum class).
    """

    def __init__(self, seq: np.ndarray, klass: np.ndarray, basis: np.ndarray, bit: np.ndarray):
        self.seq = np.asarray(seq, dtype=np.uint64)
        self.klass = np.asarray(klass, dtype=np.uint8)
        self.basis = np.asarray(basis, dtype=np.uint8)
        self.bit = np.asarray(bit, dtype=np.int8)
        n = len(self.seq)
        if not (len(self.klass) == len(self.basis) == len(self.bit) == n):
            raise ValueError("pulse field arrays must have equal length")

    def __len__(self) -> int:
        return len(self.seq)

    def record(self, i: int) -> PulseRecord:
        bit = int(self.bit[i])
        return PulseRecord(
            sequence_number=int(self.seq[i]),
            basis=int(self.basis[i]),
            bit=None if bit == NO_BIT else bit,
            source_class=int(self.klass[i]),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.klass, minlength=5).astype(np.int64)


def pulse_fields(seed: int, seqs: np.ndarray, params: SourceParams):
    """Pulse (class, basis, bit) at arbitrary sequence numbers.

    This is the authoritative definition of the pulse stream for a given
    seed; both the transmitter cache and any desk-scale re-derivation go
    through it.
    """
    seqs = np.asarray(seqs, dtype=np.uint64)
    edges = np.cumsum(params.class_probabilities())
    u = rng.uniform(rng.derive_key(seed, "pulse-class"), seqs)
    klass = np.searchsorted(edges, u, side="right").astype(np.uint8)
    np.clip(klass, 0, 4, out=klass)

    basis = _CLASS_BASIS[klass].astype(np.int8)
    vac = klass == CLASS_O
    if vac.any():
        obasis = rng.bits(rng.derive_key(seed, "pulse-obasis"), seqs[vac])
        basis[vac] = obasis.astype(np.int8)

    bit = rng.bits(rng.derive_key(seed, "pulse-bit"), seqs).astype(np.int8)
    bit[vac] = NO_BIT
    return klass, basis.astype(np.uint8), bit


def prepare_pulses(n: int, params: SourceParams, seed: int) -> PulseBlock:
    """Materialise the first `n` pulses of the stream for `seed`."""
    if n <= 0:
        raise ValueError("pulse count must be > 0")
    seqs = np.arange(n, dtype=np.uint64)
    klass, basis, bit = pulse_fields(seed, seqs, params)
    return PulseBlock(seqs, klass, basis, bit)


_EXACT_COUNT_LIMIT = 1 << 22


def window_class_counts(seed: int, params: SourceParams, start: int, stop: int) -> np.ndarray:
    """Sent-pulse counts per class over [start, stop).

    Exact (by regeneration) for windows up to ~4M pulses; larger windows use
    the analytic expectation, which is what the desk-scale tallies need.
    """
    if stop <= start:
        return np.zeros(5, dtype=np.int64)
    n = stop - start
    if n <= _EXACT_COUNT_LIMIT:
        seqs = np.arange(start, stop, dtype=np.uint64)
        klass, _, _ = pulse_fields(seed, seqs, params)
        return np.bincount(klass, minlength=5).astype(np.int64)
    counts = np.rint(params.class_probabilities() * n).astype(np.int64)
    counts[0] += n - counts.sum()
    return counts


class VirtualPulseSource:
    """Transmitter-side pulse cache backed by (seed, sequence) regeneration."""

    def __init__(self, seed: int, params: SourceParams, n_total: int):
        self.seed = seed
        self.params = params
        self.n_total = int(n_total)
        self._count_memo: dict = {}

    def lookup(self, seqs: np.ndarray):
        return pulse_fields(self.seed, seqs, self.params)

    def sent_counts(self, start: int, stop: int) -> np.ndarray:
        stop = min(stop, self.n_total)
        key = (start, stop)
        counts = self._count_memo.get(key)
        if counts is None:
            counts = window_class_counts(self.seed, self.params, start, stop)
            self._count_memo[key] = counts
        return counts.copy()


# --- binary record format ------------------------------------------------
#
# Fixed-width replay format: 8-byte little-endian sequence number followed
# by one packed byte (bits 0-2 class, bit 3 basis, bit 4 bit value, bit 5
# bit-present flag).

_MAGIC = b"QKDPULS1"


def write_pulse_records(path, block: PulseBlock) -> None:
    packed = block.klass.astype(np.uint8) | (block.basis.astype(np.uint8) << 3)
    has_bit = block.bit >= 0
    packed |= (np.where(has_bit, block.bit, 0).astype(np.uint8) << 4)
    packed |= (has_bit.astype(np.uint8) << 5)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(block)))
        body = np.empty(len(block), dtype=[("seq", "<u8"), ("f", "u1")])
        body["seq"] = block.seq
        body["f"] = packed
        fh.write(body.tobytes())


def read_pulse_records(path) -> PulseBlock:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError("not a pulse record file")
        (n,) = struct.unpack("<Q", fh.read(8))
        body = np.frombuffer(fh.read(n * 9), dtype=[("seq", "<u8"), ("f", "u1")])
    if len(body) != n:
        raise ValueError("truncated pulse record file")
    packed = body["f"]
    klass = (packed & 0x07).astype(np.uint8)
    basis = ((packed >> 3) & 0x01).astype(np.uint8)
    bit = ((packed >> 4) & 0x01).astype(np.int8)
    bit[((packed >> 5) & 0x01) == 0] = NO_BIT
    return PulseBlock(body["seq"].copy(), klass, basis, bit)
