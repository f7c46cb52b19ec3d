"""LDPC information reconciliation for 100-kbit sifted-key packets.

A fixed ladder of quasi-cyclic codes covers design QBERs from 0.5% to 8%.
Codes are lifted from a column-weight-3, row-regular base graph (200 base
columns, lift size 500, so n = 100,000) with deterministically seeded
circulant shifts and 4-cycle repair; both parties rebuild identical codes
from the ladder constants.  Decoding is syndrome-target belief propagation
(tanh rule) with at most 100 iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from . import rng

PACKET_BITS = 100_000
LIFT = 500
BASE_COLS = 200
COL_WEIGHT = 3
BASE_EDGES = BASE_COLS * COL_WEIGHT

EFFICIENCY = 1.15
DESIGN_MARGIN = 1.5
QBER_LIMIT = 0.11
MAX_ITERATIONS = 100

_CONSTRUCTION_SEED = 0x51D2C0DE
_MAX_LLR = 30.0

# (nominal QBER rung, base rows).  Each rung's row count starts from the
# smallest divisor of the 600 base edges at or above 200 * EFFICIENCY *
# H(rung * DESIGN_MARGIN); divisors keep expanded rows exactly regular,
# which keeps the decoder fully vectorisable.  Decode reliability at each
# rung's nominal flip rate was then verified empirically and the 0.5% rung
# bumped one divisor (15 -> 20: the (3,40)-regular graph's BP threshold
# falls short of its entropy target).  Syndrome fraction is base_rows/200.
LADDER: Tuple[Tuple[float, int], ...] = (
    (0.005, 20),
    (0.01, 30),
    (0.02, 50),
    (0.03, 75),
    (0.05, 100),
    (0.08, 150),
)


class QberTooHigh(ValueError):
    """Sampled QBER at or above the protocol threshold; packet rejected."""


class LdpcCode:
    """One expanded quasi-cyclic code of the ladder."""

    def __init__(self, rung_index: int, rung_qber: float, base_rows: int):
        self.rung_index = rung_index
        self.rung_qber = rung_qber
        self.base_rows = base_rows
        self.n = BASE_COLS * LIFT
        self.m = base_rows * LIFT
        self.row_weight = BASE_EDGES // base_rows
        ecol, erow, eshift = _construct_base(rung_index, base_rows)

        z = LIFT
        tq = np.arange(z, dtype=np.int64)
        col_base_edges = np.arange(BASE_EDGES, dtype=np.int64).reshape(BASE_COLS, COL_WEIGHT)
        self.var_edges = (
            col_base_edges[:, None, :] * z + tq[None, :, None]
        ).reshape(self.n, COL_WEIGHT)

        row_base_edges = np.empty((base_rows, self.row_weight), dtype=np.int64)
        for i in range(base_rows):
            row_base_edges[i] = np.nonzero(erow == i)[0]
        shifts = eshift[row_base_edges]
        self.chk_edges = (
            row_base_edges[:, None, :] * z + ((tq[None, :, None] - shifts[:, None, :]) % z)
        ).reshape(self.m, self.row_weight)

        self.edge_var = (ecol[:, None] * z + tq[None, :]).reshape(BASE_EDGES * z)

    @property
    def syndrome_bits(self) -> int:
        return self.m

    @property
    def syndrome_fraction(self) -> float:
        return self.m / self.n

    @property
    def design_qber(self) -> float:
        return self.rung_qber * DESIGN_MARGIN


def _construct_base(rung_index: int, base_rows: int):
    """Row-regular base graph plus 4-cycle-free circulant shifts."""
    row_weight = BASE_EDGES // base_rows
    key = rng.derive_key(_CONSTRUCTION_SEED, "ldpc-base", rung_index)
    order = np.argsort(rng.hash_u64(key, np.arange(BASE_EDGES)), kind="stable")
    cols = np.repeat(np.arange(base_rows), row_weight)[order].reshape(BASE_COLS, COL_WEIGHT)

    # Repair columns that drew the same base row twice: swap a slot with a
    # later column when the swap leaves both columns duplicate-free.
    for _ in range(200):
        bad = [j for j in range(BASE_COLS) if len(set(cols[j])) < COL_WEIGHT]
        if not bad:
            break
        for j in bad:
            slots = cols[j].tolist()
            if len(set(slots)) == COL_WEIGHT:
                continue
            dup_slot = next(s for s in range(COL_WEIGHT) if slots.count(slots[s]) > 1)
            fixed = False
            for step in range(1, BASE_COLS):
                j2 = (j + step) % BASE_COLS
                for s2 in range(COL_WEIGHT):
                    a, b = cols[j, dup_slot], cols[j2, s2]
                    if b not in cols[j] and a not in np.delete(cols[j2], s2):
                        cols[j, dup_slot], cols[j2, s2] = b, a
                        fixed = True
                        break
                if fixed:
                    break
    else:
        raise RuntimeError("base graph repair did not converge")

    ecol = np.repeat(np.arange(BASE_COLS), COL_WEIGHT)
    erow = cols.reshape(-1)

    shift_key = rng.derive_key(_CONSTRUCTION_SEED, "ldpc-shift", rung_index)
    counters = np.arange(BASE_EDGES, dtype=np.uint64)
    eshift = (rng.hash_u64(shift_key, counters) % np.uint64(LIFT)).astype(np.int64)

    # Remove lifted 4-cycles: columns sharing two base rows must not have
    # matching shift differences.
    pair_map = {}
    for j in range(BASE_COLS):
        rows = sorted(cols[j])
        for a in range(COL_WEIGHT):
            for b in range(a + 1, COL_WEIGHT):
                pair_map.setdefault((rows[a], rows[b]), []).append(j)
    edge_of = {(int(erow[e]), int(ecol[e])): e for e in range(BASE_EDGES)}
    bump = BASE_EDGES
    for (r1, r2), js in pair_map.items():
        if len(js) < 2:
            continue
        seen = set()
        for j in js:
            e1, e2 = edge_of[(r1, j)], edge_of[(r2, j)]
            diff = int((eshift[e1] - eshift[e2]) % LIFT)
            attempts = 0
            while diff in seen:
                eshift[e1] = int(rng.hash_u64(shift_key, [np.uint64(bump)])[0] % LIFT)
                bump += 1
                diff = int((eshift[e1] - eshift[e2]) % LIFT)
                attempts += 1
                if attempts > 1000:
                    raise RuntimeError("could not clear 4-cycles")
            seen.add(diff)
    return ecol, erow, eshift


@lru_cache(maxsize=None)
def _code_for_rung(rung_index: int) -> LdpcCode:
    rung_qber, base_rows = LADDER[rung_index]
    return LdpcCode(rung_index, rung_qber, base_rows)


def code_by_index(rung_index: int) -> LdpcCode:
    if not (0 <= rung_index < len(LADDER)):
        raise ValueError(f"unknown LDPC rung index {rung_index}")
    return _code_for_rung(rung_index)


def select_ldpc_code(sampled_qber: float) -> LdpcCode:
    """Lowest-overhead rung whose design QBER covers the sampled QBER with
    the safety margin; deterministic.  Rejects QBER at or above 11%."""
    if sampled_qber < 0:
        raise ValueError("sampled_qber must be >= 0")
    if sampled_qber >= QBER_LIMIT:
        raise QberTooHigh(f"sampled QBER {sampled_qber:.4f} >= {QBER_LIMIT}")
    # design_qber(rung) = rung * margin, so the margin cancels against the
    # sampled side and the rule reduces to the first rung at or above the
    # sampled QBER.
    for idx, (rung_qber, _) in enumerate(LADDER):
        if rung_qber >= sampled_qber - 1e-12:
            return code_by_index(idx)
    return code_by_index(len(LADDER) - 1)


def ldpc_syndrome(bits: np.ndarray, code: LdpcCode) -> np.ndarray:
    """Syndrome (uint8 array of m parity bits) of a packet."""
    b = np.asarray(bits, dtype=np.uint8)
    if len(b) != code.n:
        raise ValueError(f"packet must be {code.n} bits")
    return np.bitwise_xor.reduce(b[code.edge_var][code.chk_edges], axis=1)


def ldpc_decode(
    noisy_bits: np.ndarray,
    syndrome: np.ndarray,
    code: LdpcCode,
    qber_hint: float,
    max_iterations: int = MAX_ITERATIONS,
) -> Optional[np.ndarray]:
    """Belief-propagation syndrome decoding.

    Returns the corrected packet (whose syndrome matches exactly) or None
    after `max_iterations` without syndrome convergence.
    """
    y = np.asarray(noisy_bits, dtype=np.uint8)
    target = (np.asarray(syndrome, dtype=np.uint8) ^ ldpc_syndrome(y, code)).astype(np.uint8)
    if not target.any():
        return y.copy()

    p = min(max(qber_hint, 1e-4), 0.25)
    llr0 = math.log((1.0 - p) / p)
    msgs = np.full(code.n * COL_WEIGHT, llr0)
    target_sign = 1.0 - 2.0 * target.astype(np.float64)

    for _ in range(max_iterations):
        t = np.tanh(0.5 * np.clip(msgs[code.chk_edges], -_MAX_LLR, _MAX_LLR))
        mag = np.abs(t)
        np.clip(mag, 1e-300, 1.0, out=mag)
        log_mag = np.log(mag)
        neg = t < 0.0
        row_sign = np.where(np.bitwise_xor.reduce(neg, axis=1), -1.0, 1.0)
        ext_sign = row_sign[:, None] * np.where(neg, -1.0, 1.0)
        ext_mag = np.exp(np.clip(log_mag.sum(axis=1)[:, None] - log_mag, -745.0, -1e-16))
        r_edges = target_sign[:, None] * ext_sign * 2.0 * np.arctanh(ext_mag)

        r = np.empty_like(msgs)
        r[code.chk_edges] = r_edges
        rv = r[code.var_edges]
        total = llr0 + rv.sum(axis=1)
        msgs[code.var_edges] = total[:, None] - rv

        err = (total < 0.0).astype(np.uint8)
        if np.array_equal(np.bitwise_xor.reduce(err[code.edge_var][code.chk_edges], axis=1), target):
            return y ^ err
    return None


def syndrome_to_bytes(syndrome: np.ndarray) -> bytes:
    return np.packbits(syndrome).tobytes()


def syndrome_from_bytes(data: bytes, nbits: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits]
