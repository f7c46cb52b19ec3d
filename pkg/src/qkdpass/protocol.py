"""Real-time key distillation between the satellite and ground station roles.

The two roles are sequential state machines exchanging frames over a lossy
duplex channel inside a deterministic virtual-time scheduler; they share no
state except the pre-shared authentication pools.  The flow mirrors the
six-step distillation: the ground reports detection batches (with a 10%
disclosed sample), the satellite answers with basis/intensity comparison
results plus per-packet LDPC syndromes, the ground decodes, runs the
finite-key analysis per privacy-amplification block and sends signed PA
instructions, and the satellite returns signed feedback with a CRC of each
final key.  Every handler is idempotent on frame sequence numbers, so
retransmission and duplication never change state.

Commit order guarantees one-sided keys cannot arise on any deterministic
path: the ground accepts a block only after validating the signed feedback
CRC, and the satellite accepts it only on later ground traffic whose
instruction acknowledges that validation.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import auth, ldpc, rng
from .finitekey import DecoyTally, KeyRateResult, analyze_block, block_report
from .frames import (
    Frame,
    FrameError,
    TYPE_BASIS_COMPARISON,
    TYPE_ORIGINAL_KEY_INFO,
    TYPE_PA_FEEDBACK,
    TYPE_PA_INSTRUCTION,
    decode_frame,
    encode_frame,
    signed_bytes,
)
from .link import DetectionBlock
from .privacy import pack_key_bits, toeplitz_hash
from .source import CLASS_NAMES, CLASS_X1, CLASS_X2, CLASS_Y1, CLASS_Y2, SourceParams, VirtualPulseSource

PACKET_BITS = ldpc.PACKET_BITS
BLOCK_SIZES = tuple(range(100_000, 1_000_000, 100_000))
HASH_SEED_BYTES = 32
AUTH_BITS_PER_BLOCK = 2 * auth.TAG_BITS

_SIGNAL_MASK = np.array([False, False, True, False, True])
_DECOY_MASK = np.array([False, True, False, True, False])

_RUNG_REJECTED = 0xFF


@dataclass(frozen=True)
class ChannelParams:
    """Lossy duplex frame channel behaviour.

    `latency_jitter` spreads per-frame delay uniformly over
    latency * [1 - jitter, 1 + jitter], which reorders repeats in flight.
    `blackout_from` turns the loss probability to 1 from that virtual time
    on (starvation/timeout scenarios).
    """

    frame_loss_prob: float = 0.0
    latency: float = 0.02
    repeat_interval: float = 0.1
    corrupt_prob: float = 0.0
    latency_jitter: float = 0.0
    blackout_from: Optional[float] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.frame_loss_prob < 1.0):
            raise ValueError("frame_loss_prob must lie in [0, 1)")
        if self.latency < 0 or self.repeat_interval <= 0:
            raise ValueError("latency must be >= 0 and repeat_interval > 0")
        if not (0.0 <= self.corrupt_prob < 1.0):
            raise ValueError("corrupt_prob must lie in [0, 1)")
        if not (0.0 <= self.latency_jitter < 1.0):
            raise ValueError("latency_jitter must lie in [0, 1)")


@dataclass(frozen=True)
class SessionConfig:
    source: SourceParams = SourceParams()
    packet_bits: int = PACKET_BITS
    sample_fraction: float = 0.10
    block_size: int = 500_000
    xi: float = 1e-10
    batch_detections: int = 250_000
    session_timeout: float = 600.0
    auth_messages: int = 160

    def __post_init__(self) -> None:
        if self.block_size not in BLOCK_SIZES:
            raise ValueError(f"block_size must be one of {BLOCK_SIZES}")
        if not (0.0 < self.sample_fraction < 1.0):
            raise ValueError("sample_fraction must lie in (0, 1)")
        if self.packet_bits != PACKET_BITS:
            raise ValueError(f"packet_bits is fixed at {PACKET_BITS}")

    @property
    def packets_per_block(self) -> int:
        return self.block_size // self.packet_bits


@dataclass
class SiftedPacket:
    """One 100-kbit sifted packet as seen by one party."""

    packet_id: int
    bits: np.ndarray
    sampled_qber: float
    syndrome: Optional[bytes] = None
    corrected: bool = False

    def __post_init__(self) -> None:
        if len(self.bits) != PACKET_BITS:
            raise ValueError(f"sifted packets are exactly {PACKET_BITS} bits")
        if not (0.0 <= self.sampled_qber <= 1.0):
            raise ValueError("sampled_qber must lie in [0, 1]")


@dataclass
class PABlock:
    """One privacy-amplification block."""

    block_id: int
    block_size: int
    input_packets: List[int]
    hash_seed: bytes
    final_length: int = 0
    final_key: bytes = b""

    def __post_init__(self) -> None:
        if self.block_size != PACKET_BITS * len(self.input_packets):
            raise ValueError("block size must equal the sum of its packet sizes")
        if self.final_length > self.block_size:
            raise ValueError("final length cannot exceed the block size")


# --- payload codecs ---------------------------------------------------------


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def _unpack_bits(data: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:n].astype(np.uint8)


def encode_key_info(batch: int, total: int, seqs: np.ndarray, bases: np.ndarray,
                    sample_pos: np.ndarray, sample_bits: np.ndarray) -> bytes:
    head = struct.pack("<IIII", batch, total, len(seqs), len(sample_pos))
    return b"".join(
        (head, seqs.astype("<u8").tobytes(), _pack_bits(bases),
         sample_pos.astype("<u4").tobytes(), _pack_bits(sample_bits))
    )


def decode_key_info(payload: bytes):
    batch, total, n, ns = struct.unpack_from("<IIII", payload)
    off = 16
    seqs = np.frombuffer(payload, dtype="<u8", count=n, offset=off).astype(np.uint64)
    off += 8 * n
    nb = (n + 7) // 8
    bases = _unpack_bits(payload[off : off + nb], n)
    off += nb
    pos = np.frombuffer(payload, dtype="<u4", count=ns, offset=off).astype(np.int64)
    off += 4 * ns
    bits = _unpack_bits(payload[off : off + (ns + 7) // 8], ns)
    return batch, total, seqs, bases, pos, bits


@dataclass(frozen=True)
class PacketAnnounce:
    packet_id: int
    rung_index: int
    sampled_qber: float
    crc: int
    syndrome: bytes


def encode_basis_comparison(batch: int, codes: np.ndarray, sent_counts: np.ndarray,
                            packets: Sequence[PacketAnnounce]) -> bytes:
    parts = [struct.pack("<II", batch, len(codes)), codes.astype(np.uint8).tobytes(),
             sent_counts.astype("<u8").tobytes(), struct.pack("<I", len(packets))]
    for p in packets:
        parts.append(struct.pack("<IBdII", p.packet_id, p.rung_index, p.sampled_qber,
                                 p.crc, len(p.syndrome)))
        parts.append(p.syndrome)
    return b"".join(parts)


def decode_basis_comparison(payload: bytes):
    batch, n = struct.unpack_from("<II", payload)
    off = 8
    codes = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off).copy()
    off += n
    sent = np.frombuffer(payload, dtype="<u8", count=5, offset=off).astype(np.int64)
    off += 40
    (npkt,) = struct.unpack_from("<I", payload, off)
    off += 4
    packets = []
    for _ in range(npkt):
        pid, rung, qber, crc, slen = struct.unpack_from("<IBdII", payload, off)
        off += struct.calcsize("<IBdII")
        packets.append(PacketAnnounce(pid, rung, qber, crc, payload[off : off + slen]))
        off += slen
    return batch, codes, sent, packets


KIND_BLOCK = 0
KIND_FINISH = 1

STATUS_OK = 1
STATUS_REJECTED = 0


def encode_instruction(kind: int, block_id: int, prev_block: int, prev_status: int,
                       final_length: int, packet_ids: Sequence[int],
                       discarded: Sequence[int], hash_seed: bytes) -> bytes:
    head = struct.pack("<BIiBII", kind, block_id, prev_block, prev_status,
                       final_length, len(packet_ids))
    body = np.asarray(packet_ids, dtype="<u4").tobytes()
    tail = struct.pack("<I", len(discarded)) + np.asarray(discarded, dtype="<u4").tobytes()
    return head + body + tail + struct.pack("<H", len(hash_seed)) + hash_seed


def decode_instruction(payload: bytes):
    kind, block_id, prev_block, prev_status, final_length, npkt = struct.unpack_from("<BIiBII", payload)
    off = struct.calcsize("<BIiBII")
    pids = np.frombuffer(payload, dtype="<u4", count=npkt, offset=off).astype(np.int64)
    off += 4 * npkt
    (ndisc,) = struct.unpack_from("<I", payload, off)
    off += 4
    disc = np.frombuffer(payload, dtype="<u4", count=ndisc, offset=off).astype(np.int64)
    off += 4 * ndisc
    (slen,) = struct.unpack_from("<H", payload, off)
    off += 2
    seed = payload[off : off + slen]
    return kind, block_id, prev_block, prev_status, final_length, pids, disc, seed


def encode_feedback(kind: int, block_id: int, status: int, final_length: int, key_crc: int) -> bytes:
    return struct.pack("<BIBII", kind, block_id, status, final_length, key_crc)


def decode_feedback(payload: bytes):
    return struct.unpack("<BIBII", payload)


# --- shared sifting core ----------------------------------------------------


def classify_detections(pulse_source: VirtualPulseSource, seqs: np.ndarray, bases: np.ndarray):
    """Satellite-side comparison of reported detections with the pulse cache.

    Returns (valid mask, class, matched mask, sent bits) with out-of-range
    sequence numbers masked out (they are dropped and counted by callers).
    """
    valid = seqs < pulse_source.n_total
    vseqs = seqs[valid]
    klass, sbasis, sbit = pulse_source.lookup(vseqs)
    matched = bases[valid] == sbasis
    return valid, klass, matched, sbit


def choose_sample(n_events: int, fraction: float, key: int, offset: int) -> np.ndarray:
    """Ground-side sampling mask over a detection batch (seeded locally)."""
    if n_events == 0:
        return np.zeros(0, dtype=bool)
    u = rng.uniform(key, np.arange(offset, offset + n_events, dtype=np.uint64))
    return u < fraction


@dataclass
class SiftResult:
    """Offline one-shot sift of a whole detection stream (reference path)."""

    packets: List[SiftedPacket]
    ground_bits: np.ndarray
    sample_positions: np.ndarray
    sample_bits: np.ndarray
    tally: DecoyTally
    kept_bits_total: int
    dropped_events: int
    leftover_bits: int


def sift_and_sample(
    detections: DetectionBlock,
    pulse_source: VirtualPulseSource,
    seed: int,
    config: SessionConfig,
) -> SiftResult:
    """Joint sift/sample/tally over a full pass, outside the frame protocol.

    The protocol roles run exactly this logic batch by batch; this one-shot
    form is the reference for tests and local analysis.
    """
    order = np.argsort(detections.seq, kind="stable")
    seqs = detections.seq[order]
    bases = detections.basis[order]
    bits = detections.bit[order]

    sample = choose_sample(len(seqs), config.sample_fraction, rng.derive_key(seed, "sample"), 0)
    valid, klass, matched, sbit = classify_detections(pulse_source, seqs, bases)
    dropped = int(len(seqs) - valid.sum())

    vsample = sample[valid]
    vbits = bits[valid]
    signal = _SIGNAL_MASK[klass]
    kept = matched & signal & ~vsample

    sat_bits = sbit[kept].astype(np.uint8)
    gnd_bits = vbits[kept]

    samp_sig = matched & signal & vsample
    errs = int((vbits[samp_sig] != sbit[samp_sig]).sum())
    tot = int(samp_sig.sum())
    qber = errs / tot if tot else 0.0

    sent = pulse_source.sent_counts(0, pulse_source.n_total)
    det_counts = np.bincount(klass[matched], minlength=5)
    decoy_err = matched & _DECOY_MASK[klass] & (vbits != sbit)
    err_counts = np.bincount(klass[decoy_err], minlength=5)
    err_counts[[CLASS_Y1, CLASS_Y2]] = 0
    tally = DecoyTally(
        {c: int(sent[i]) for i, c in enumerate(CLASS_NAMES)},
        {c: int(det_counts[i]) for i, c in enumerate(CLASS_NAMES)},
        {c: int(err_counts[i]) for i, c in enumerate(CLASS_NAMES)},
    )

    packets: List[SiftedPacket] = []
    n_pkts = len(sat_bits) // PACKET_BITS
    for pid in range(n_pkts):
        chunk = sat_bits[pid * PACKET_BITS : (pid + 1) * PACKET_BITS]
        packets.append(SiftedPacket(pid, chunk, qber))
    return SiftResult(
        packets=packets,
        ground_bits=gnd_bits,
        sample_positions=np.nonzero(sample)[0],
        sample_bits=bits[sample],
        tally=tally,
        kept_bits_total=int(len(sat_bits)),
        dropped_events=dropped,
        leftover_bits=int(len(sat_bits) - n_pkts * PACKET_BITS),
    )


# --- virtual-time scheduler and channel --------------------------------------


class EventScheduler:
    def __init__(self) -> None:
        self.now = 0.0
        self._heap: List[Tuple[float, int, Callable[[], None]]] = []
        self._tie = 0

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        self._tie += 1
        heappush(self._heap, (t, self._tie, fn))

    def run(self, until: float, stop: Callable[[], bool]) -> None:
        while self._heap and not stop():
            t, _, fn = heappop(self._heap)
            if t > until:
                self.now = until
                return
            self.now = t
            fn()
        self.now = max(self.now, until if not self._heap else self.now)


class LossyDuplexChannel:
    """iid frame loss, latency and bit-flip corruption, per direction."""

    def __init__(self, params: ChannelParams, scheduler: EventScheduler, seed: int):
        self.params = params
        self.scheduler = scheduler
        self._keys = {
            d: (
                rng.derive_key(seed, "chan-loss", d),
                rng.derive_key(seed, "chan-corrupt", d),
                rng.derive_key(seed, "chan-jitter", d),
            )
            for d in ("up", "down")
        }
        self._count = {"up": 0, "down": 0}
        self.sent = {"up": 0, "down": 0}
        self.delivered = {"up": 0, "down": 0}
        self.corrupted = {"up": 0, "down": 0}

    def transmit(self, direction: str, data: bytes, deliver: Callable[[bytes], None]) -> None:
        loss_key, corrupt_key, jitter_key = self._keys[direction]
        i = self._count[direction]
        self._count[direction] = i + 1
        self.sent[direction] += 1
        now = self.scheduler.now
        loss_p = self.params.frame_loss_prob
        if self.params.blackout_from is not None and now >= self.params.blackout_from:
            loss_p = 1.0
        if float(rng.uniform(loss_key, [i])[0]) < loss_p:
            return
        if float(rng.uniform(corrupt_key, [i])[0]) < self.params.corrupt_prob:
            data = self._corrupt(data, corrupt_key, i)
            self.corrupted[direction] += 1
        self.delivered[direction] += 1
        delay = self.params.latency
        if self.params.latency_jitter > 0.0:
            u = float(rng.uniform(jitter_key, [i])[0])
            delay *= 1.0 + self.params.latency_jitter * (2.0 * u - 1.0)
        self.scheduler.call_at(now + delay, lambda d=data: deliver(d))

    @staticmethod
    def _corrupt(data: bytes, key: int, counter: int) -> bytes:
        buf = bytearray(data)
        n_flips = 1 + int(rng.hash_u64(key, [(counter << 8) | 1])[0] % 8)
        idx = rng.hash_u64(rng.derive_key(key, "pos", counter), np.arange(n_flips)) % (8 * len(buf))
        for b in np.asarray(idx, dtype=np.int64):
            buf[b >> 3] ^= 1 << (b & 7)
        return bytes(buf)


# --- satellite role -----------------------------------------------------------


@dataclass
class _SatPacket:
    bits: np.ndarray
    rung_index: int
    sampled_qber: float
    syndrome_bits: int
    crc: int


class SatelliteRole:
    """Transmitter-side state machine: answers detection reports, encodes
    syndromes, performs PA on signed instruction, returns signed feedback."""

    def __init__(self, session_id: int, pulse_source: VirtualPulseSource,
                 config: SessionConfig, sign_auth: auth.OneTimeAuthenticator,
                 verify_auth: auth.OneTimeAuthenticator):
        self.session_id = session_id
        self.pulses = pulse_source
        self.config = config
        self._sign = sign_auth
        self._verify = verify_auth
        self.state = "sift"
        self.outcome: Optional[str] = None
        self.abort_reason: Optional[str] = None

        self._expected_batch = 0
        self._total_batches: Optional[int] = None
        self._next_window_start = 0
        self._responses: Dict[int, bytes] = {}
        self._kept_chunks: List[np.ndarray] = []
        self._kept_total = 0
        self._next_packet = 0
        self._packets: Dict[int, _SatPacket] = {}
        self._dropped_events = 0

        self._seq_out = 0
        self._pending_blocks: Dict[int, Tuple[int, bytes]] = {}
        self._accepted_blocks: Dict[int, Tuple[int, bytes]] = {}
        self._block_feedback: Dict[int, bytes] = {}
        self._finish_feedback: Optional[bytes] = None
        self._seen_finish = False

    # -- frame handling

    def handle_frame(self, data: bytes) -> List[bytes]:
        if self.outcome == "aborted":
            return []
        try:
            frame = decode_frame(data)
        except FrameError:
            return []
        if frame.session_id != self.session_id:
            return []
        if frame.frame_type == TYPE_ORIGINAL_KEY_INFO:
            return self._on_key_info(frame)
        if frame.frame_type == TYPE_PA_INSTRUCTION:
            return self._on_instruction(frame)
        return []

    def _respond(self, frame_type: int, payload: bytes, signed: bool) -> bytes:
        seq = self._seq_out
        self._seq_out += 1
        if signed:
            frame = Frame(frame_type, self.session_id, seq, payload, b"\x00" * 16)
            tag = self._sign.sign(seq, signed_bytes(frame))
            frame = Frame(frame_type, self.session_id, seq, payload, tag)
        else:
            frame = Frame(frame_type, self.session_id, seq, payload)
        return encode_frame(frame)

    def _on_key_info(self, frame: Frame) -> List[bytes]:
        try:
            batch, total, seqs, bases, sample_pos, sample_bits = decode_key_info(frame.payload)
        except (struct.error, ValueError):
            return []
        if batch in self._responses:
            return [self._responses[batch]]
        if batch != self._expected_batch or self.state != "sift":
            return []
        self._total_batches = total

        valid, klass, matched, sbit = classify_detections(self.pulses, seqs, bases)
        self._dropped_events += int(len(seqs) - valid.sum())

        sample_mask = np.zeros(len(seqs), dtype=bool)
        sample_mask[sample_pos[sample_pos < len(seqs)]] = True
        vsample = sample_mask[valid]

        signal = _SIGNAL_MASK[klass]
        kept = matched & signal & ~vsample

        # Sampled QBER of this batch from the disclosed sample bits.
        bit_by_pos = np.full(len(seqs), -1, dtype=np.int8)
        pos_ok = sample_pos < len(seqs)
        bit_by_pos[sample_pos[pos_ok]] = sample_bits[: len(sample_pos)][pos_ok]
        vbit = bit_by_pos[valid]
        samp_sig = matched & signal & vsample & (vbit >= 0)
        errs = int((vbit[samp_sig] != sbit[samp_sig]).sum())
        tot = int(samp_sig.sum())
        batch_qber = errs / tot if tot else 0.0

        # Per-event codes: class, matched, disclosed decoy bit, kept flag.
        codes = klass.astype(np.uint8) | (matched.astype(np.uint8) << 3)
        decoy = _DECOY_MASK[klass]
        codes |= ((decoy & (sbit > 0)).astype(np.uint8) << 4)
        codes |= (kept.astype(np.uint8) << 5)
        full_codes = np.zeros(len(seqs), dtype=np.uint8)
        full_codes[valid] = codes

        window_end = int(seqs[-1]) + 1 if len(seqs) else self._next_window_start
        sent_counts = self.pulses.sent_counts(self._next_window_start, max(window_end, self._next_window_start))
        self._next_window_start = max(window_end, self._next_window_start)

        self._kept_chunks.append(sbit[kept].astype(np.uint8))
        self._kept_total += int(kept.sum())

        announces = self._complete_packets(batch_qber)
        payload = encode_basis_comparison(batch, full_codes, sent_counts.astype(np.uint64), announces)
        out = self._respond(TYPE_BASIS_COMPARISON, payload, signed=False)
        self._responses[batch] = out
        self._expected_batch += 1
        if self._expected_batch >= total:
            self.state = "pa"
        return [out]

    def _complete_packets(self, batch_qber: float) -> List[PacketAnnounce]:
        announces: List[PacketAnnounce] = []
        while self._kept_total >= PACKET_BITS:
            buf = np.concatenate(self._kept_chunks) if len(self._kept_chunks) > 1 else self._kept_chunks[0]
            bits = buf[:PACKET_BITS]
            rest = buf[PACKET_BITS:]
            self._kept_chunks = [rest]
            self._kept_total = len(rest)
            pid = self._next_packet
            self._next_packet += 1
            try:
                code = ldpc.select_ldpc_code(batch_qber)
            except ldpc.QberTooHigh:
                self._packets[pid] = _SatPacket(bits, _RUNG_REJECTED, batch_qber, 0, 0)
                announces.append(PacketAnnounce(pid, _RUNG_REJECTED, batch_qber, 0, b""))
                continue
            syndrome = ldpc.ldpc_syndrome(bits, code)
            crc = zlib.crc32(pack_key_bits(bits)) & 0xFFFFFFFF
            self._packets[pid] = _SatPacket(bits, code.rung_index, batch_qber, code.syndrome_bits, crc)
            announces.append(
                PacketAnnounce(pid, code.rung_index, batch_qber, crc, ldpc.syndrome_to_bytes(syndrome))
            )
        return announces

    # -- privacy amplification

    def _on_instruction(self, frame: Frame) -> List[bytes]:
        if not self._verify.verify(frame.sequence, signed_bytes(frame), frame.signature or b""):
            # Authentication failure: a first-seen block instruction is
            # abandoned on both sides via a signed rejection; a corrupted
            # duplicate of an already-answered one is answered from cache
            # with no state change (idempotence).
            try:
                _, block_id, *_ = decode_instruction(frame.payload)
            except (struct.error, ValueError):
                return []
            cached = self._block_feedback.get(block_id)
            if cached is not None:
                return [cached]
            if self._seen_finish:
                return [self._finish_feedback] if self._finish_feedback else []
            payload = encode_feedback(KIND_BLOCK, block_id, STATUS_REJECTED, 0, 0)
            out = self._respond(TYPE_PA_FEEDBACK, payload, signed=True)
            self._block_feedback[block_id] = out
            self._pending_blocks.pop(block_id, None)
            return [out]
        try:
            kind, block_id, prev_block, prev_status, final_length, pids, discarded, seed = decode_instruction(
                frame.payload
            )
        except (struct.error, ValueError):
            return []

        if prev_block >= 0 and prev_block in self._pending_blocks:
            entry = self._pending_blocks.pop(prev_block)
            if prev_status == STATUS_OK:
                self._accepted_blocks[prev_block] = entry

        if kind == KIND_FINISH:
            if not self._seen_finish:
                self._seen_finish = True
                for bid in sorted(self._pending_blocks):
                    # Never acknowledged by the ground; discard conservatively.
                    self._pending_blocks.pop(bid)
                total_bits = sum(n for n, _ in self._accepted_blocks.values())
                payload = encode_feedback(KIND_FINISH, 0, STATUS_OK, total_bits & 0xFFFFFFFF, 0)
                self._finish_feedback = self._respond(TYPE_PA_FEEDBACK, payload, signed=True)
                self.state = "done"
                self.outcome = "matched"
            return [self._finish_feedback] if self._finish_feedback else []

        if block_id in self._block_feedback:
            return [self._block_feedback[block_id]]

        for pid in discarded:
            self._packets.pop(int(pid), None)

        known = all(int(p) in self._packets and self._packets[int(p)].rung_index != _RUNG_REJECTED for p in pids)
        if not known or final_length < 0 or final_length > PACKET_BITS * len(pids):
            payload = encode_feedback(KIND_BLOCK, block_id, STATUS_REJECTED, 0, 0)
            out = self._respond(TYPE_PA_FEEDBACK, payload, signed=True)
            self._block_feedback[block_id] = out
            return [out]

        bits = np.concatenate([self._packets[int(p)].bits for p in pids])
        key_bits = toeplitz_hash(bits, seed, final_length) if final_length > 0 else np.zeros(0, np.uint8)
        key = pack_key_bits(key_bits) if final_length > 0 else b""
        crc = zlib.crc32(key) & 0xFFFFFFFF
        self._pending_blocks[block_id] = (final_length, key)
        payload = encode_feedback(KIND_BLOCK, block_id, STATUS_OK, final_length, crc)
        out = self._respond(TYPE_PA_FEEDBACK, payload, signed=True)
        self._block_feedback[block_id] = out
        return [out]

    def on_deadline(self) -> None:
        if self.outcome is not None:
            return
        if self._accepted_blocks:
            self.outcome = "matched"
            self.abort_reason = "deadline with unconfirmed tail"
        else:
            self.outcome = "aborted"
            self.abort_reason = "session deadline"
        self._pending_blocks.clear()

    def accepted_keys(self) -> Dict[int, Tuple[int, bytes]]:
        if self.outcome != "matched":
            return {}
        return dict(self._accepted_blocks)


# --- ground role --------------------------------------------------------------


@dataclass
class _BatchTally:
    sent: np.ndarray
    detected: np.ndarray
    errors: np.ndarray
    matched_signal: int
    sampled_signal: int


@dataclass
class _GroundBlock:
    block: PABlock
    result: KeyRateResult
    tally: DecoyTally
    lec_syndrome: int
    disclosed_samples: int
    key: bytes = b""
    status: str = "pending"


class GroundRole:
    """Receiver-side state machine: reports detections, decodes syndromes,
    runs the finite-key analysis and drives privacy amplification."""

    def __init__(self, session_id: int, detections: DetectionBlock,
                 config: SessionConfig, seed: int,
                 sign_auth: auth.OneTimeAuthenticator,
                 verify_auth: auth.OneTimeAuthenticator):
        self.session_id = session_id
        self.config = config
        self._sign = sign_auth
        self._verify = verify_auth
        self.state = "sift"
        self.outcome: Optional[str] = None
        self.abort_reason: Optional[str] = None

        order = np.argsort(detections.seq, kind="stable")
        self._seqs = detections.seq[order]
        self._bases = detections.basis[order]
        self._bits = detections.bit[order]
        n = len(self._seqs)
        bd = config.batch_detections
        self._n_batches = max(1, (n + bd - 1) // bd) if n else 1
        self._sample_key = rng.derive_key(seed, "sample")
        self._seed = seed

        self._seq_out = 0
        self._cur_batch = 0
        self._outstanding: Optional[bytes] = None
        self._batch_frames: Dict[int, bytes] = {}
        self._batch_tallies: List[_BatchTally] = []
        self._kept_chunks: List[np.ndarray] = []
        self._kept_total = 0
        self._next_packet = 0
        self._packet_meta: Dict[int, PacketAnnounce] = {}
        self._packet_bits: Dict[int, np.ndarray] = {}
        self._packet_batches: Dict[int, List[int]] = {}
        self._corrected: List[int] = []
        self._discarded: List[int] = []
        self._corrected_qber: Dict[int, float] = {}
        self._total_sample_bits = 0

        self._blocks: List[_GroundBlock] = []
        self._cur_block = -1
        self._prev_block = -1
        self._prev_status = STATUS_OK
        self._confirmed: Dict[int, Tuple[int, bytes]] = {}
        self._finish_done = False

    # -- outbound

    def start(self) -> Optional[bytes]:
        return self._advance_sift()

    def outstanding_frame(self) -> Optional[bytes]:
        if self.outcome is not None:
            return None
        return self._outstanding

    def _next_seq(self) -> int:
        seq = self._seq_out
        self._seq_out += 1
        return seq

    def _advance_sift(self) -> Optional[bytes]:
        k = self._cur_batch
        if k >= self._n_batches:
            return self._start_pa()
        if k not in self._batch_frames:
            bd = self.config.batch_detections
            lo, hi = k * bd, min((k + 1) * bd, len(self._seqs))
            seqs = self._seqs[lo:hi]
            bases = self._bases[lo:hi]
            bits = self._bits[lo:hi]
            sample = choose_sample(len(seqs), self.config.sample_fraction, self._sample_key, lo)
            pos = np.nonzero(sample)[0].astype(np.uint32)
            payload = encode_key_info(k, self._n_batches, seqs, bases, pos, bits[sample])
            self._total_sample_bits += int(sample.sum())
            frame = Frame(TYPE_ORIGINAL_KEY_INFO, self.session_id, self._next_seq(), payload)
            self._batch_frames[k] = encode_frame(frame)
        self._outstanding = self._batch_frames[k]
        return self._outstanding

    # -- inbound

    def handle_frame(self, data: bytes) -> List[bytes]:
        if self.outcome == "aborted" or self.outcome == "matched":
            return []
        try:
            frame = decode_frame(data)
        except FrameError:
            return []
        if frame.session_id != self.session_id:
            return []
        if frame.frame_type == TYPE_BASIS_COMPARISON:
            return self._on_basis_comparison(frame)
        if frame.frame_type == TYPE_PA_FEEDBACK:
            return self._on_feedback(frame)
        return []

    def _on_basis_comparison(self, frame: Frame) -> List[bytes]:
        if self.state != "sift":
            return []
        try:
            batch, codes, sent, packets = decode_basis_comparison(frame.payload)
        except (struct.error, ValueError):
            return []
        if batch != self._cur_batch:
            return []
        bd = self.config.batch_detections
        lo = batch * bd
        if len(codes) != len(self._seqs[lo : lo + bd]):
            return []

        klass = codes & 0x07
        matched = (codes >> 3) & 1
        disclosed = (codes >> 4) & 1
        kept = ((codes >> 5) & 1).astype(bool)
        my_bits = self._bits[lo : lo + len(codes)]

        det = np.bincount(klass[matched.astype(bool)], minlength=8)[:5]
        decoy = _DECOY_MASK[np.clip(klass, 0, 4)]
        err_mask = matched.astype(bool) & decoy & (my_bits != disclosed)
        err = np.bincount(klass[err_mask], minlength=8)[:5]
        err[[CLASS_Y1, CLASS_Y2]] = 0
        sig = _SIGNAL_MASK[np.clip(klass, 0, 4)] & matched.astype(bool)
        self._batch_tallies.append(
            _BatchTally(
                sent=sent.astype(np.int64),
                detected=det.astype(np.int64),
                errors=err.astype(np.int64),
                matched_signal=int(sig.sum()),
                sampled_signal=int(sig.sum() - kept.sum()),
            )
        )

        self._kept_chunks.append(my_bits[kept])
        self._kept_total += int(kept.sum())
        self._consume_packets(packets, batch)

        self._cur_batch += 1
        out = self._advance_sift()
        return [out] if out is not None else []

    def _consume_packets(self, announces: Sequence[PacketAnnounce], batch: int) -> None:
        for ann in announces:
            if self._kept_total < PACKET_BITS:
                break
            buf = np.concatenate(self._kept_chunks) if len(self._kept_chunks) > 1 else self._kept_chunks[0]
            bits = buf[:PACKET_BITS]
            self._kept_chunks = [buf[PACKET_BITS:]]
            self._kept_total = len(buf) - PACKET_BITS
            pid = self._next_packet
            self._next_packet += 1
            self._packet_meta[pid] = ann
            self._packet_batches[pid] = self._batches_for_packet(pid)
            if ann.rung_index == _RUNG_REJECTED:
                self._discarded.append(pid)
                continue
            code = ldpc.code_by_index(ann.rung_index)
            syndrome = ldpc.syndrome_from_bytes(ann.syndrome, code.syndrome_bits)
            corrected = ldpc.ldpc_decode(bits, syndrome, code, max(ann.sampled_qber, 1e-3))
            if corrected is None or (zlib.crc32(pack_key_bits(corrected)) & 0xFFFFFFFF) != ann.crc:
                self._discarded.append(pid)
                continue
            self._corrected.append(pid)
            self._packet_bits[pid] = corrected
            self._corrected_qber[pid] = float((corrected != bits).mean())

    def _batches_for_packet(self, pid: int) -> List[int]:
        # Batches whose kept bits overlap the packet's kept-stream interval.
        lo, hi = pid * PACKET_BITS, (pid + 1) * PACKET_BITS
        out, acc = [], 0
        for idx, bt in enumerate(self._batch_tallies):
            batch_kept = bt.matched_signal - bt.sampled_signal
            if acc + batch_kept > lo and acc < hi:
                out.append(idx)
            acc += batch_kept
        return out

    # -- privacy amplification

    def _start_pa(self) -> Optional[bytes]:
        if self.state != "sift":
            return self._outstanding
        self.state = "pa"
        per = self.config.packets_per_block
        ids = list(self._corrected)
        groups = [ids[i : i + per] for i in range(0, len(ids), per)]
        for bid, group in enumerate(groups):
            self._blocks.append(self._build_block(bid, group))
        return self._advance_pa()

    def _build_block(self, bid: int, group: List[int]) -> _GroundBlock:
        batches = sorted({b for pid in group for b in self._packet_batches[pid]})
        sent = np.zeros(5, dtype=np.int64)
        det = np.zeros(5, dtype=np.int64)
        err = np.zeros(5, dtype=np.int64)
        matched_signal = 0
        sampled_signal = 0
        for b in batches:
            bt = self._batch_tallies[b]
            sent += bt.sent
            det += bt.detected
            err += bt.errors
            matched_signal += bt.matched_signal
            sampled_signal += bt.sampled_signal
        tally = DecoyTally(
            {c: int(sent[i]) for i, c in enumerate(CLASS_NAMES)},
            {c: int(det[i]) for i, c in enumerate(CLASS_NAMES)},
            {c: int(err[i]) for i, c in enumerate(CLASS_NAMES)},
        )
        block_size = PACKET_BITS * len(group)
        lec_syndrome = sum(
            ldpc.code_by_index(self._packet_meta[p].rung_index).syndrome_bits for p in group
        )
        lec = lec_syndrome + AUTH_BITS_PER_BLOCK
        fraction = min(1.0, block_size / matched_signal) if matched_signal else 1.0
        result = analyze_block(tally, self.config.source, xi=self.config.xi, lec=lec,
                               sifted_fraction=fraction)
        final_length = min(result.key_length, block_size)
        seed = rng.byte_stream(rng.derive_key(self._seed, "pa-seed", bid), HASH_SEED_BYTES)
        block = PABlock(bid, block_size, list(group), seed, final_length)
        disclosed = int(round(sampled_signal * (block_size / matched_signal))) if matched_signal else 0
        return _GroundBlock(block, result, tally, lec_syndrome, disclosed)

    def _advance_pa(self) -> Optional[bytes]:
        self._cur_block += 1
        if self._cur_block >= len(self._blocks):
            return self._send_finish()
        gb = self._blocks[self._cur_block]
        bits = np.concatenate([self._packet_bits[p] for p in gb.block.input_packets])
        if gb.block.final_length > 0:
            gb.key = pack_key_bits(toeplitz_hash(bits, gb.block.hash_seed, gb.block.final_length))
        payload = encode_instruction(
            KIND_BLOCK,
            gb.block.block_id,
            self._prev_block,
            self._prev_status,
            gb.block.final_length,
            gb.block.input_packets,
            self._discarded if self._cur_block == 0 else [],
            gb.block.hash_seed,
        )
        self._outstanding = self._sign_and_encode(TYPE_PA_INSTRUCTION, payload)
        return self._outstanding

    def _send_finish(self) -> Optional[bytes]:
        self.state = "finish"
        payload = encode_instruction(KIND_FINISH, 0xFFFFFFF0, self._prev_block, self._prev_status,
                                     0, [], [], b"")
        self._outstanding = self._sign_and_encode(TYPE_PA_INSTRUCTION, payload)
        return self._outstanding

    def _sign_and_encode(self, frame_type: int, payload: bytes) -> bytes:
        seq = self._next_seq()
        probe = Frame(frame_type, self.session_id, seq, payload, b"\x00" * 16)
        tag = self._sign.sign(seq, signed_bytes(probe))
        return encode_frame(Frame(frame_type, self.session_id, seq, payload, tag))

    def _on_feedback(self, frame: Frame) -> List[bytes]:
        if self.state not in ("pa", "finish"):
            return []
        try:
            kind, block_id, status, final_length, key_crc = decode_feedback(frame.payload)
        except struct.error:
            return []
        verified = self._verify.verify(frame.sequence, signed_bytes(frame), frame.signature or b"")
        if kind == KIND_FINISH:
            if verified and self.state == "finish" and not self._finish_done:
                self._finish_done = True
                self.outcome = "matched"
                self._outstanding = None
            return []
        if self.state != "pa" or self._cur_block >= len(self._blocks):
            return []
        gb = self._blocks[self._cur_block]
        if block_id != gb.block.block_id:
            return []
        # Authentication failure abandons this block on both sides (the next
        # instruction's ack status tells the satellite to discard its copy).
        if verified and status == STATUS_OK and final_length == gb.block.final_length and (
            zlib.crc32(gb.key) & 0xFFFFFFFF
        ) == key_crc:
            gb.status = "confirmed"
            self._confirmed[block_id] = (gb.block.final_length, gb.key)
            self._prev_block, self._prev_status = block_id, STATUS_OK
        else:
            gb.status = "discarded"
            self._prev_block, self._prev_status = block_id, STATUS_REJECTED
        out = self._advance_pa()
        return [out] if out is not None else []

    def on_deadline(self) -> None:
        if self.outcome is not None:
            return
        if self._confirmed:
            self.outcome = "matched"
            self.abort_reason = "deadline with confirmed blocks"
        else:
            self.outcome = "aborted"
            self.abort_reason = "session deadline"
        self._outstanding = None

    def accepted_keys(self) -> Dict[int, Tuple[int, bytes]]:
        if self.outcome != "matched":
            return {}
        return dict(self._confirmed)

    # -- reporting

    def block_reports(self) -> List[dict]:
        out = []
        for gb in self._blocks:
            rep = block_report(gb.block.block_id, gb.tally, gb.result, self.config.xi)
            rep["status"] = gb.status
            rep["block_size"] = gb.block.block_size
            rep["packets"] = list(gb.block.input_packets)
            rep["lec_syndrome_bits"] = gb.lec_syndrome
            rep["lec_auth_bits"] = AUTH_BITS_PER_BLOCK
            rep["disclosed_sample_bits"] = gb.disclosed_samples
            out.append(rep)
        return out

    def packet_reports(self) -> List[dict]:
        out = []
        for pid in sorted(self._packet_meta):
            ann = self._packet_meta[pid]
            out.append(
                {
                    "packet_id": pid,
                    "sampled_qber": ann.sampled_qber,
                    "corrected_qber": self._corrected_qber.get(pid),
                    "rung_index": None if ann.rung_index == _RUNG_REJECTED else ann.rung_index,
                    "status": "corrected" if pid in self._corrected_qber else "discarded",
                }
            )
        return out


# --- session driver -----------------------------------------------------------


@dataclass
class SessionReport:
    outcome: str
    reason: str
    satellite_outcome: str
    ground_outcome: str
    packets_sifted: int
    packets_corrected: int
    packets_discarded: int
    final_bits: int
    lec_total: int
    disclosed_sample_bits: int
    blocks: List[dict]
    packets: List[dict]
    ground_keys: Dict[int, Tuple[int, bytes]]
    satellite_keys: Dict[int, Tuple[int, bytes]]
    frames_sent: Dict[str, int]
    frames_delivered: Dict[str, int]
    vacuum_rate: float
    dropped_events: int
    virtual_duration: float


def run_session(
    pulse_source: VirtualPulseSource,
    detections: DetectionBlock,
    channel_params: ChannelParams,
    config: SessionConfig,
    seed: int,
    session_id: int = 1,
) -> SessionReport:
    """Drive both role state machines over the lossy channel to termination."""
    # Pads are indexed by per-direction frame sequence numbers, which grow
    # with the batch count; size both pools for the whole session.
    n_batches = max(1, (len(detections) + config.batch_detections - 1) // config.batch_detections)
    pool_messages = config.auth_messages + 2 * n_batches
    pool_secret_up = rng.byte_stream(rng.derive_key(seed, "auth-up"), 32)
    pool_secret_down = rng.byte_stream(rng.derive_key(seed, "auth-down"), 32)
    pool_up = auth.expand_pool(pool_secret_up, pool_messages)
    pool_down = auth.expand_pool(pool_secret_down, pool_messages)

    ground = GroundRole(
        session_id, detections, config, rng.derive_key(seed, "ground"),
        sign_auth=auth.OneTimeAuthenticator(pool_up),
        verify_auth=auth.OneTimeAuthenticator(pool_down),
    )
    satellite = SatelliteRole(
        session_id, pulse_source, config,
        sign_auth=auth.OneTimeAuthenticator(pool_down),
        verify_auth=auth.OneTimeAuthenticator(pool_up),
    )

    sched = EventScheduler()
    channel = LossyDuplexChannel(channel_params, sched, rng.derive_key(seed, "channel"))

    def to_satellite(data: bytes) -> None:
        for reply in satellite.handle_frame(data):
            channel.transmit("down", reply, to_ground)

    def to_ground(data: bytes) -> None:
        for reply in ground.handle_frame(data):
            channel.transmit("up", reply, to_satellite)

    def tick() -> None:
        frame = ground.outstanding_frame()
        if frame is not None:
            channel.transmit("up", frame, to_satellite)
            sched.call_at(sched.now + channel_params.repeat_interval, tick)

    first = ground.start()
    if first is not None:
        sched.call_at(0.0, tick)

    def finished() -> bool:
        return ground.outcome is not None and (
            satellite.outcome is not None or ground.outcome == "matched"
        )

    sched.run(config.session_timeout, finished)
    ground.on_deadline()
    satellite.on_deadline()

    g_keys = ground.accepted_keys()
    s_keys = satellite.accepted_keys()
    if g_keys == s_keys and g_keys:
        outcome, reason = "matched", "final keys identical"
    elif not g_keys and not s_keys:
        if ground.outcome == "matched" and satellite.outcome == "matched":
            outcome, reason = "empty", "completed with no key material"
        else:
            outcome, reason = "aborted", ground.abort_reason or satellite.abort_reason or "no keys"
    else:
        outcome, reason = "violation", "one-sided key acceptance"

    blocks = ground.block_reports()
    lec_total = sum(int(b["Lec"]) for b in blocks if b["status"] == "confirmed")
    disclosed = ground._total_sample_bits
    tallies = ground._batch_tallies
    vac_sent = sum(int(t.sent[0]) for t in tallies)
    vac_det = sum(int(t.detected[0]) for t in tallies)

    return SessionReport(
        outcome=outcome,
        reason=reason,
        satellite_outcome=satellite.outcome or "aborted",
        ground_outcome=ground.outcome or "aborted",
        packets_sifted=len(ground._packet_meta),
        packets_corrected=len(ground._corrected),
        packets_discarded=len(ground._discarded),
        final_bits=sum(n for n, _ in g_keys.values()),
        lec_total=lec_total,
        disclosed_sample_bits=disclosed,
        blocks=blocks,
        packets=ground.packet_reports(),
        ground_keys=g_keys,
        satellite_keys=s_keys,
        frames_sent=dict(channel.sent),
        frames_delivered=dict(channel.delivered),
        vacuum_rate=(vac_det / vac_sent) if vac_sent else 0.0,
        dropped_events=satellite._dropped_events,
        virtual_duration=sched.now,
    )


# --- key files -----------------------------------------------------------------

_KEY_MAGIC = b"QKDKEY01"


def write_key_file(path, session_id: int, keys: Dict[int, Tuple[int, bytes]]) -> None:
    """Final-key container: 32-byte header (magic, session id, block count,
    total bits, pad), then per block: id, bit length, packed key bytes."""
    total_bits = sum(n for n, _ in keys.values())
    with open(path, "wb") as fh:
        fh.write(_KEY_MAGIC)
        fh.write(struct.pack("<QIQ", session_id, len(keys), total_bits))
        fh.write(b"\x00" * 4)
        for bid in sorted(keys):
            nbits, data = keys[bid]
            fh.write(struct.pack("<II", bid, nbits))
            fh.write(data)


def read_key_file(path) -> Tuple[int, Dict[int, Tuple[int, bytes]]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _KEY_MAGIC:
            raise ValueError("not a key file")
        session_id, count, total_bits = struct.unpack("<QIQ", fh.read(20))
        fh.read(4)
        keys: Dict[int, Tuple[int, bytes]] = {}
        for _ in range(count):
            bid, nbits = struct.unpack("<II", fh.read(8))
            keys[bid] = (nbits, fh.read((nbits + 7) // 8))
    if sum(n for n, _ in keys.values()) != total_bits:
        raise ValueError("key file total bits mismatch")
    return session_id, keys
