"""Three-intensity decoy-state finite-key analysis.

Observed per-class detection and error counts are converted into bounds on
their expectations with a Chernoff bound at failure probability xi, the
single-photon contribution and error rate are bounded with the five-source
decoy formulas, and the secure key length follows as

    R = s1 * (1 - H(e1)) - Lec

All bound functions accept ``xi=None`` to force the statistical slack to
zero (expected value = observed value), which reduces the analysis to the
asymptotic decoy formulas; the property tests rely on that mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from .source import CLASS_NAMES, SourceParams

_LN_MIN_DELTA = math.log(1e-18)


class ConvergenceError(RuntimeError):
    """Chernoff root finding failed to bracket or converge."""


class EmptyBlockError(RuntimeError):
    """No single-photon contribution survives; the block yields no key."""


# --- Poisson photon-number coefficients -------------------------------------


def poisson_coeffs(intensity: float, k_max: int) -> np.ndarray:
    """Photon-number distribution coefficients exp(-m) m^k / k! for k <= k_max.

    The truncated sum is <= 1; the remainder is the tail mass above k_max.
    """
    if intensity < 0:
        raise ValueError("intensity must be >= 0")
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    out = np.empty(k_max + 1)
    term = math.exp(-intensity)
    for k in range(k_max + 1):
        out[k] = term
        term *= intensity / (k + 1)
    return out


# --- Chernoff bounds ---------------------------------------------------------


@dataclass(frozen=True)
class ChernoffInterval:
    """Bounds on the expectation of an observed count at failure prob xi."""

    observed: float
    failure_prob: float
    lower: float
    upper: float
    delta1: float
    delta2: float


def _upper_exponent(delta: float) -> float:
    """delta - (1 + delta) * ln(1 + delta), series-stabilised near zero."""
    if delta < 1e-3:
        # -sum_{k>=2} (-delta)^k / (k (k-1))
        acc, sign, p = 0.0, 1.0, delta * delta
        for k in range(2, 9):
            acc += sign * p / (k * (k - 1))
            sign, p = -sign, p * delta
        return -acc
    return delta - (1.0 + delta) * math.log1p(delta)


def _lower_exponent(delta: float) -> float:
    """-delta - (1 - delta) * ln(1 - delta), series-stabilised near zero."""
    if delta < 1e-3:
        acc, p = 0.0, delta * delta
        for k in range(2, 9):
            acc += p / (k * (k - 1))
            p *= delta
        return -acc
    return -delta - (1.0 - delta) * math.log(1.0 - delta)


def _bisect_log(func, ln_lo: float, ln_hi: float, max_iter: int = 200) -> float:
    f_lo = func(math.exp(ln_lo))
    f_hi = func(math.exp(ln_hi))
    if f_lo <= 0.0 or f_hi >= 0.0:
        raise ConvergenceError("root is not bracketed")
    for _ in range(max_iter):
        ln_mid = 0.5 * (ln_lo + ln_hi)
        if func(math.exp(ln_mid)) > 0.0:
            ln_lo = ln_mid
        else:
            ln_hi = ln_mid
        if ln_hi - ln_lo < 1e-12:
            return math.exp(0.5 * (ln_lo + ln_hi))
    raise ConvergenceError("bisection did not reach tolerance in 200 iterations")


def chernoff_bounds(observed: float, failure_prob: float) -> ChernoffInterval:
    """Chernoff interval [E^L, E^U] for the expectation of a count.

    delta1 solves (e^d / (1+d)^(1+d))^(X/(1+d)) = xi with E^L = X/(1+delta1);
    delta2 solves (e^-d / (1-d)^(1-d))^(X/(1-d)) = xi with E^U = X/(1-delta2).
    Roots are found by bisection in the log domain of delta to 1e-12 relative
    tolerance.  X = 0 is the conservative completion E^L = 0, E^U = ln(1/xi).
    """
    x = float(observed)
    xi = float(failure_prob)
    if x < 0:
        raise ValueError("observed count must be >= 0")
    if not (0.0 < xi < 1.0):
        raise ValueError("failure probability must lie in (0, 1)")
    ln_xi = math.log(xi)
    if x == 0.0:
        return ChernoffInterval(x, xi, 0.0, -ln_xi, math.inf, 1.0)

    def g_upper_tail(delta: float) -> float:
        return (x / (1.0 + delta)) * _upper_exponent(delta) - ln_xi

    ln_hi = math.log(2.0)
    for _ in range(80):
        if g_upper_tail(math.exp(ln_hi)) < 0.0:
            break
        ln_hi += math.log(2.0)
    else:
        raise ConvergenceError("upper-tail bracket expansion failed")
    delta1 = _bisect_log(g_upper_tail, _LN_MIN_DELTA, ln_hi)

    def g_lower_tail(delta: float) -> float:
        return (x / (1.0 - delta)) * _lower_exponent(delta) - ln_xi

    delta2 = _bisect_log(g_lower_tail, _LN_MIN_DELTA, math.log(1.0 - 1e-15))
    return ChernoffInterval(x, xi, x / (1.0 + delta1), x / (1.0 - delta2), delta1, delta2)


def _expected_lower(count: float, xi: Optional[float]) -> float:
    return float(count) if xi is None else chernoff_bounds(count, xi).lower


def _expected_upper(count: float, xi: Optional[float]) -> float:
    return float(count) if xi is None else chernoff_bounds(count, xi).upper


# --- decoy tally -------------------------------------------------------------


@dataclass(frozen=True)
class DecoyTally:
    """Per-source sent totals, matched detection counts, and error counts.

    Counts for the two decoy classes and the two signal classes are grouped
    by intensity for the bounds.  The vacuum class has no encoded bit, so
    its error count is identically zero.
    """

    sent: Mapping[str, int]
    detected: Mapping[str, int]
    errors: Mapping[str, int]

    def __post_init__(self) -> None:
        for name in CLASS_NAMES:
            s = self.sent.get(name, 0)
            d = self.detected.get(name, 0)
            e = self.errors.get(name, 0)
            if not (0 <= e <= d <= max(s, d)):
                raise ValueError(f"inconsistent tally for class {name}")

    @property
    def s_rates(self) -> Dict[str, float]:
        """Counting rate per class (detections / sent)."""
        return {
            c: (self.detected.get(c, 0) / self.sent[c]) if self.sent.get(c) else 0.0
            for c in CLASS_NAMES
        }

    @property
    def t_rates(self) -> Dict[str, float]:
        """Error counting rate per class (errors / sent)."""
        return {
            c: (self.errors.get(c, 0) / self.sent[c]) if self.sent.get(c) else 0.0
            for c in CLASS_NAMES
        }

    @property
    def e_rates(self) -> Dict[str, float]:
        """Error rate per class (errors / detections)."""
        return {
            c: (self.errors.get(c, 0) / self.detected[c]) if self.detected.get(c) else 0.0
            for c in CLASS_NAMES
        }

    def detected_by_intensity(self) -> Dict[str, int]:
        d = self.detected
        return {
            "o": int(d.get("o", 0)),
            "nu": int(d.get("x1", 0) + d.get("x2", 0)),
            "mu": int(d.get("y1", 0) + d.get("y2", 0)),
        }

    def errors_by_intensity(self) -> Dict[str, int]:
        e = self.errors
        return {
            "o": int(e.get("o", 0)),
            "nu": int(e.get("x1", 0) + e.get("x2", 0)),
            "mu": int(e.get("y1", 0) + e.get("y2", 0)),
        }

    def total_sent(self) -> int:
        return int(sum(self.sent.get(c, 0) for c in CLASS_NAMES))

    @staticmethod
    def zero() -> "DecoyTally":
        zeros = {c: 0 for c in CLASS_NAMES}
        return DecoyTally(dict(zeros), dict(zeros), dict(zeros))


def _coeffs(params: SourceParams):
    a = poisson_coeffs(params.w, 2)
    b = poisson_coeffs(params.nu, 2)
    c = poisson_coeffs(params.mu, 2)
    return a, b, c


def s1_lower(tally: DecoyTally, params: SourceParams, xi: Optional[float]) -> float:
    """Lower bound on the matched single-photon signal detections in the tally.

    The grouped detection counts enter with pessimistic Chernoff bounds
    (lower for the decoy intensity, upper for signal and vacuum); the result
    is clamped at zero.  ``xi=None`` removes the statistical slack.
    """
    a, b, c = _coeffs(params)
    p_o, p_nu, p_mu = params.p_vacuum, params.p_decoy, params.p_signal
    det = tally.detected_by_intensity()

    s_nu_low = _expected_lower(det["nu"], xi)
    s_mu_up = _expected_upper(det["mu"], xi)
    s_o_up = _expected_upper(det["o"], xi)

    denom = (p_o**2 * p_nu * p_mu) * (
        (a[0] * c[2] - c[0] * a[2]) * (a[0] * b[1] - b[0] * a[1])
        - (a[0] * b[2] - b[0] * a[2]) * (a[0] * c[1] - c[0] * a[1])
    )
    if denom <= 0:
        raise ValueError("coefficient determinant is not positive; check 0 <= w < nu < mu")

    numer = p_mu * c[1] * (
        p_o**2 * p_mu * (a[0] * c[2] - c[0] * a[2]) * a[0] * s_nu_low
        - p_o**2 * p_nu * (a[0] * b[2] - b[0] * a[2]) * a[0] * s_mu_up
        - p_o * p_nu * p_mu * a[0] * (c[2] * b[0] - b[2] * c[0]) * s_o_up
    )
    return max(0.0, numer / denom)


def e1_upper(tally: DecoyTally, params: SourceParams, s1: float, xi: Optional[float]) -> float:
    """Upper bound on the single-photon bit-flip error rate.

    Subtracts a lower bound on the vacuum (zero-photon) error contribution
    from an upper bound on the decoy error count and normalises by the
    single-photon contribution.  Clamped into [0, 0.5].  Raises
    EmptyBlockError when s1 is not positive.
    """
    if s1 <= 0.0:
        raise EmptyBlockError("no single-photon contribution; block yields no key")
    a, b, c = _coeffs(params)
    p_o, p_nu, p_mu = params.p_vacuum, params.p_decoy, params.p_signal
    det = tally.detected_by_intensity()
    err = tally.errors_by_intensity()

    t_nu_up = _expected_upper(err["nu"], xi)
    s_o_low = _expected_lower(det["o"], xi)
    s_nu_up = _expected_upper(det["nu"], xi)

    vacuum_term = (
        p_nu * b[0] * (p_nu * b[1] * s_o_low - p_o * a[1] * s_nu_up)
    ) / (2.0 * p_o * p_nu * (a[0] * b[1] - a[1] * b[0]))

    e1 = (t_nu_up - vacuum_term) * (p_mu * c[1]) / (p_nu * b[1] * s1)
    return min(0.5, max(0.0, e1))


# --- key length ---------------------------------------------------------------


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy H(x) in bits, with H(0) = H(1) = 0."""
    if not (0.0 <= x <= 1.0):
        raise ValueError("binary_entropy domain is [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def secure_key_length(s1: float, e1: float, lec: float) -> int:
    """Final key length R = s1 (1 - H(e1)) - Lec, clamped at 0, floored."""
    r = s1 * (1.0 - binary_entropy(e1)) - lec
    return max(0, math.floor(r))


@dataclass(frozen=True)
class KeyRateResult:
    """Finite-key outcome for one privacy-amplification block."""

    s1_lower: float
    e1_upper: float
    lec: float
    key_length: int
    empty: bool = False


def analyze_block(
    tally: DecoyTally,
    params: SourceParams,
    *,
    xi: Optional[float],
    lec: float,
    sifted_fraction: float = 1.0,
) -> KeyRateResult:
    """Run the full bound chain for one block.

    `sifted_fraction` is the fraction of the tally's matched signal
    detections whose bits actually entered the block (sampling removes the
    disclosed share); the single-photon bound scales with it.
    """
    if not (0.0 < sifted_fraction <= 1.0):
        raise ValueError("sifted_fraction must lie in (0, 1]")
    s1_window = s1_lower(tally, params, xi)
    if s1_window <= 0.0:
        return KeyRateResult(0.0, 0.5, lec, 0, empty=True)
    e1 = e1_upper(tally, params, s1_window, xi)
    s1_block = s1_window * sifted_fraction
    return KeyRateResult(s1_block, e1, lec, secure_key_length(s1_block, e1, lec))


# Bound invocations per block: three detection-count bounds in the
# single-photon formula and three more in the error-rate formula.
CHERNOFF_INVOCATIONS_PER_BLOCK = 6


def block_report(
    block_id: object,
    tally: DecoyTally,
    result: KeyRateResult,
    xi: Optional[float],
) -> Dict[str, object]:
    """JSON-ready per-block analysis report.

    `xi` is the per-invocation failure probability; the union-bound total
    over the block's bound invocations is reported alongside it.
    """
    return {
        "block_id": block_id,
        "sent": {c: int(tally.sent.get(c, 0)) for c in CLASS_NAMES},
        "S": tally.s_rates,
        "T": tally.t_rates,
        "s1_lower": result.s1_lower,
        "e1_upper": result.e1_upper,
        "Lec": result.lec,
        "R": result.key_length,
        "xi": xi,
        "xi_union_total": None if xi is None else xi * CHERNOFF_INVOCATIONS_PER_BLOCK,
    }


def write_block_reports(path, reports) -> None:
    with open(path, "w") as fh:
        json.dump(list(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
