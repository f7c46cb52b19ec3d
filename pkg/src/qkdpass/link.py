"""Satellite-pass geometry and the lossy, noisy quantum downlink.

The pass model is a circular orbit crossing the station's sky on a great
circle, parameterised by the maximum elevation of the pass.  The channel
model composes a far-field geometric capture term with airmass-scaled
atmospheric loss, static pointing-jitter loss and the receiver/gating
efficiencies.  Detection is Monte Carlo over pulses with Poisson photon
statistics folded into a per-pulse click probability.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from . import rng
from .source import BASIS_X, BASIS_Z, NO_BIT, PulseBlock, SourceParams

EARTH_RADIUS = 6_371_000.0
EARTH_GM = 3.986004418e14
MIN_ELEVATION_DEG = 10.0
PULSE_RATE = 625e6
PULSE_PERIOD = 1.0 / PULSE_RATE


@dataclass(frozen=True)
class PassProfile:
    """Geometry of one satellite pass over the ground station."""

    max_elevation: float
    start_epoch: float = 0.0
    duration: float = 300.0
    orbit_altitude: float = 500e3
    timestep: float = 1.0

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        if not (MIN_ELEVATION_DEG <= self.max_elevation <= 90.0):
            raise ValueError(
                f"max_elevation must lie in [{MIN_ELEVATION_DEG}, 90] degrees"
            )
        if self.timestep <= 0:
            raise ValueError("timestep must be > 0")
        if self.orbit_altitude <= 0:
            raise ValueError("orbit_altitude must be > 0")


@dataclass(frozen=True)
class LinkSample:
    """One timestep of the pass: geometry plus channel state."""

    time: float
    elevation: float
    distance: float
    transmittance: float = 1.0
    background_rate: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 < self.transmittance <= 1.0):
            raise ValueError("transmittance must lie in (0, 1]")
        if self.background_rate < 0:
            raise ValueError("background_rate must be >= 0")


@dataclass(frozen=True)
class LinkBudgetParams:
    """Free-space link budget parameters for the quantum downlink."""

    divergence_full_angle: float = 10e-6
    receiver_aperture: float = 0.28
    ogs_efficiency: float = 0.49
    detector_efficiency: float = 0.60
    pointing_jitter_rms: float = 1.2e-6
    atmospheric_zenith_loss_db: float = 3.0
    dark_count_rate: float = 100.0
    gate_width: float = 800e-12
    gate_signal_efficiency: float = 0.80

    def __post_init__(self) -> None:
        for name in ("ogs_efficiency", "detector_efficiency", "gate_signal_efficiency"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1]")
        for name in ("divergence_full_angle", "receiver_aperture", "gate_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.pointing_jitter_rms < 0 or self.dark_count_rate < 0:
            raise ValueError("jitter and dark count rate must be >= 0")
        if self.atmospheric_zenith_loss_db < 0:
            raise ValueError("atmospheric_zenith_loss_db must be >= 0")


# --- geometry --------------------------------------------------------------


def _central_angle(elevation_rad: float, altitude: float) -> float:
    """Earth central angle between station and sub-satellite point."""
    r = EARTH_RADIUS / (EARTH_RADIUS + altitude)
    return math.acos(r * math.cos(elevation_rad)) - elevation_rad


def _slant_distance(central_angle: float, altitude: float) -> float:
    rs = EARTH_RADIUS + altitude
    return math.sqrt(
        EARTH_RADIUS**2 + rs**2 - 2.0 * EARTH_RADIUS * rs * math.cos(central_angle)
    )


def _elevation(central_angle: float, altitude: float) -> float:
    r = EARTH_RADIUS / (EARTH_RADIUS + altitude)
    return math.atan2(math.cos(central_angle) - r, math.sin(central_angle))


def generate_pass(profile: PassProfile) -> List[LinkSample]:
    """Geometry-only link samples for one pass.

    Elevation rises from the link threshold to `max_elevation` and falls
    symmetrically; the sample grid is symmetric about culmination so the
    distance arc is exactly mirror-symmetric.  The data-collection window
    is clipped to `duration` seconds centred on culmination.
    """
    alt = profile.orbit_altitude
    omega = math.sqrt(EARTH_GM / (EARTH_RADIUS + alt) ** 3)
    psi_min = _central_angle(math.radians(profile.max_elevation), alt)
    psi_edge = _central_angle(math.radians(MIN_ELEVATION_DEG), alt)

    # Time from culmination to the 10-degree link threshold.
    ratio = math.cos(psi_edge) / math.cos(psi_min) if psi_min < psi_edge else 1.0
    t_edge = math.acos(min(1.0, max(-1.0, ratio))) / omega
    half = min(t_edge, profile.duration / 2.0)
    k = int(math.floor(half / profile.timestep))

    mid = profile.start_epoch + profile.duration / 2.0
    samples: List[LinkSample] = []
    for i in range(-k, k + 1):
        t = i * profile.timestep
        cos_psi = math.cos(psi_min) * math.cos(omega * t)
        psi = math.acos(min(1.0, max(-1.0, cos_psi)))
        samples.append(
            LinkSample(
                time=mid + t,
                elevation=math.degrees(_elevation(psi, alt)),
                distance=_slant_distance(psi, alt),
            )
        )
    return samples


# --- channel ---------------------------------------------------------------


def channel_transmittance(sample: LinkSample, params: LinkBudgetParams) -> float:
    """End-to-end photon transmittance for one link sample.

    Composes geometric capture, sec(zenith)-scaled atmospheric loss, OGS
    and detector efficiencies, temporal-gating efficiency and a static
    pointing-jitter penalty.  Clamped into (0, 1].
    """
    footprint = params.divergence_full_angle * sample.distance
    geometric = 1.0 if footprint <= params.receiver_aperture else (
        params.receiver_aperture / footprint
    ) ** 2

    elevation = max(sample.elevation, MIN_ELEVATION_DEG)
    airmass = 1.0 / math.sin(math.radians(elevation))
    atmospheric = 10.0 ** (-params.atmospheric_zenith_loss_db * airmass / 10.0)

    jitter = math.exp(-4.0 * (params.pointing_jitter_rms / params.divergence_full_angle) ** 2)

    eta = (
        geometric
        * atmospheric
        * params.ogs_efficiency
        * params.detector_efficiency
        * params.gate_signal_efficiency
        * jitter
    )
    return min(1.0, max(eta, 1e-300))


def apply_channel(
    samples: Sequence[LinkSample], params: LinkBudgetParams, background_rate: float
) -> List[LinkSample]:
    """Fill transmittance and background rate into geometry-only samples."""
    return [
        replace(s, transmittance=channel_transmittance(s, params), background_rate=background_rate)
        for s in samples
    ]


# --- detection -------------------------------------------------------------


@dataclass(frozen=True)
class DetectionEvent:
    """One ground-side detection; `is_background` is simulator truth only."""

    sequence_number: int
    measured_basis: int
    measured_bit: int
    timestamp: float
    is_background: bool


class DetectionBlock:
    """Struct-of-arrays detection stream, ordered by sequence number."""

    def __init__(self, seq, basis, bit, time, is_background):
        self.seq = np.asarray(seq, dtype=np.uint64)
        self.basis = np.asarray(basis, dtype=np.uint8)
        self.bit = np.asarray(bit, dtype=np.uint8)
        self.time = np.asarray(time, dtype=np.float64)
        self.is_background = np.asarray(is_background, dtype=bool)

    def __len__(self) -> int:
        return len(self.seq)

    def record(self, i: int) -> DetectionEvent:
        return DetectionEvent(
            sequence_number=int(self.seq[i]),
            measured_basis=int(self.basis[i]),
            measured_bit=int(self.bit[i]),
            timestamp=float(self.time[i]),
            is_background=bool(self.is_background[i]),
        )

    @classmethod
    def empty(cls) -> "DetectionBlock":
        return cls(
            np.empty(0, np.uint64),
            np.empty(0, np.uint8),
            np.empty(0, np.uint8),
            np.empty(0, np.float64),
            np.empty(0, bool),
        )


def simulate_detections(
    pulses: PulseBlock,
    link: Sequence[LinkSample],
    params: LinkBudgetParams,
    source_params: SourceParams,
    seed: int,
    *,
    pulse_rate: float = PULSE_RATE,
    gated: bool = True,
) -> DetectionBlock:
    """Monte-Carlo detection of a pulse block across the pass.

    Pulses are spread evenly over the provided link samples (the desk-scale
    stream sweeps the whole arc).  Per pulse of intensity mu at transmittance
    eta the click probability is 1 - (1 - p_noise) * exp(-mu * eta); noise
    and wrong-basis clicks yield uniformly random bits, matched-basis photon
    clicks flip with the intrinsic error probability.

    With ``gated=True`` the sample transmittance (which already includes the
    gating efficiency) and the in-gate noise window are used directly; with
    ``gated=False`` the pre-gate stream is produced for `apply_gating`.
    """
    n = len(pulses)
    n_samples = len(link)
    if n_samples == 0 or n == 0 or n < n_samples:
        raise ValueError("pulse stream and link sample lengths are mismatched")

    idx = (np.arange(n, dtype=np.uint64) * n_samples // n).astype(np.intp)
    trans = np.array([s.transmittance for s in link])
    bg = np.array([s.background_rate for s in link])
    times = np.array([s.time for s in link])

    eta = trans[idx]
    noise_rate = bg[idx] + 4.0 * params.dark_count_rate
    if gated:
        p_noise = noise_rate * params.gate_width
    else:
        eta = np.minimum(1.0, eta / params.gate_signal_efficiency)
        p_noise = noise_rate * (1.0 / pulse_rate)

    intensity = source_params.class_intensities()[pulses.klass]
    p_photon = -np.expm1(-intensity * eta)
    p_click = p_photon + p_noise * (1.0 - p_photon)

    u = rng.uniform(rng.derive_key(seed, "det-click"), pulses.seq)
    detected = u < p_click
    if not detected.any():
        return DetectionBlock.empty()

    seq = pulses.seq[detected]
    photon = u[detected] < p_photon[detected]

    basis_g = rng.bits(rng.derive_key(seed, "det-basis"), seq)
    noise_bit = rng.bits(rng.derive_key(seed, "det-noisebit"), seq)
    flip = rng.uniform(rng.derive_key(seed, "det-flip"), seq) < source_params.e_intrinsic

    sent_basis = pulses.basis[detected]
    sent_bit = pulses.bit[detected]
    matched_photon = photon & (basis_g == sent_basis) & (sent_bit != NO_BIT)
    bit = np.where(matched_photon, (sent_bit.astype(np.uint8) ^ flip), noise_bit)

    # Timestamp: fractional position of the pulse inside its link timestep.
    pulse_idx = np.nonzero(detected)[0]
    sample_idx = idx[pulse_idx]
    step = times[1] - times[0] if n_samples > 1 else 1.0
    frac = (pulse_idx * n_samples % n) / n
    t = times[sample_idx] + frac * step

    return DetectionBlock(seq, basis_g, bit.astype(np.uint8), t, ~photon)


def apply_gating(
    events: DetectionBlock,
    pulse_period: float,
    params: LinkBudgetParams,
    seed: int,
) -> DetectionBlock:
    """Temporal gating: keep signal events with the gating efficiency and
    background events with the gate/period duty ratio."""
    if params.gate_width > pulse_period:
        raise ValueError("gate_width must not exceed the pulse period")
    if len(events) == 0:
        return events
    duty = params.gate_width / pulse_period
    u = rng.uniform(rng.derive_key(seed, "gate"), events.seq)
    keep = np.where(events.is_background, u < duty, u < params.gate_signal_efficiency)
    return DetectionBlock(
        events.seq[keep],
        events.basis[keep],
        events.bit[keep],
        events.time[keep],
        events.is_background[keep],
    )


def write_link_csv(path, samples: Sequence[LinkSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "elevation_deg", "distance_m", "transmittance", "background_cps"])
        for s in samples:
            writer.writerow(
                [f"{s.time:.6f}", f"{s.elevation:.6f}", f"{s.distance:.3f}",
                 f"{s.transmittance:.9e}", f"{s.background_rate:.3f}"]
            )
