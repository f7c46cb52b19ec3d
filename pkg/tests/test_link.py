import math

import numpy as np
import pytest

from qkdpass.link import (
    EARTH_RADIUS,
    LinkBudgetParams,
    LinkSample,
    PassProfile,
    apply_channel,
    apply_gating,
    channel_transmittance,
    generate_pass,
    simulate_detections,
    write_link_csv,
)
from qkdpass.source import CLASS_O, CLASS_Y2, BASIS_Z, PulseBlock, SourceParams, prepare_pulses


def binom_sigma(n, p):
    return math.sqrt(n * p * (1 - p))


def slant_range_oracle(elevation_deg, altitude):
    # Direct slant-range form, independent of the central-angle route.
    el = math.radians(elevation_deg)
    r = EARTH_RADIUS
    return math.sqrt((r + altitude) ** 2 - (r * math.cos(el)) ** 2) - r * math.sin(el)


def test_zenith_pass_min_distance():
    samples = generate_pass(PassProfile(max_elevation=90.0))
    d_min = min(s.distance for s in samples)
    assert math.isclose(d_min, 500e3, rel_tol=1e-9)


def test_slant_range_oracle_at_34_degrees():
    samples = generate_pass(PassProfile(max_elevation=34.1))
    d_min = min(s.distance for s in samples)
    assert math.isclose(d_min, slant_range_oracle(34.1, 500e3), rel_tol=1e-9)


def test_distance_symmetry():
    samples = generate_pass(PassProfile(max_elevation=47.0, timestep=0.5))
    d = [s.distance for s in samples]
    assert len(d) % 2 == 1
    assert np.allclose(d, d[::-1], rtol=1e-12)
    mid = len(d) // 2
    assert d[mid] == min(d)


def test_elevation_profile_rises_to_max():
    profile = PassProfile(max_elevation=60.0, duration=600.0)
    samples = generate_pass(profile)
    el = [s.elevation for s in samples]
    assert abs(max(el) - 60.0) < 0.1
    assert min(el) >= 10.0 - 0.5
    mid = len(el) // 2
    assert all(el[i] <= el[i + 1] + 1e-9 for i in range(mid))


def test_rejects_low_max_elevation():
    with pytest.raises(ValueError):
        PassProfile(max_elevation=8.0)
    with pytest.raises(ValueError):
        PassProfile(max_elevation=45.0, duration=-1.0)


def test_transmittance_near_field_clamp():
    params = LinkBudgetParams(
        ogs_efficiency=1.0, detector_efficiency=1.0, gate_signal_efficiency=1.0,
        pointing_jitter_rms=0.0, atmospheric_zenith_loss_db=0.0,
    )
    s = LinkSample(time=0.0, elevation=90.0, distance=1.0)
    assert channel_transmittance(s, params) == 1.0


def test_geometric_capture_hand_value():
    # 500 km at 10 urad with a 0.28 m aperture: (0.28 / 5.0)^2
    params = LinkBudgetParams(
        ogs_efficiency=1.0, detector_efficiency=1.0, gate_signal_efficiency=1.0,
        pointing_jitter_rms=0.0, atmospheric_zenith_loss_db=0.0,
    )
    s = LinkSample(time=0.0, elevation=90.0, distance=500e3)
    eta = channel_transmittance(s, params)
    assert math.isclose(eta, (0.28 / 5.0) ** 2, rel_tol=1e-12)
    assert abs(10 * math.log10(eta) + 25.0) < 0.1


def test_inverse_square_in_distance():
    params = LinkBudgetParams(
        ogs_efficiency=1.0, detector_efficiency=1.0, gate_signal_efficiency=1.0,
        pointing_jitter_rms=0.0, atmospheric_zenith_loss_db=0.0,
    )
    e1 = channel_transmittance(LinkSample(0.0, 50.0, 600e3), params)
    e2 = channel_transmittance(LinkSample(0.0, 50.0, 1200e3), params)
    assert math.isclose(e1 / e2, 4.0, rel_tol=1e-12)


def test_transmittance_monotonicity():
    params = LinkBudgetParams()
    etas_d = [channel_transmittance(LinkSample(0.0, 45.0, d), params) for d in np.linspace(500e3, 2e6, 40)]
    assert all(a >= b for a, b in zip(etas_d, etas_d[1:]))
    etas_el = [channel_transmittance(LinkSample(0.0, el, 800e3), params) for el in np.linspace(10, 90, 40)]
    assert all(a <= b for a, b in zip(etas_el, etas_el[1:]))


def test_jitter_penalty_folds_in():
    base = LinkBudgetParams(pointing_jitter_rms=0.0)
    jit = LinkBudgetParams(pointing_jitter_rms=2e-6)
    s = LinkSample(0.0, 45.0, 800e3)
    ratio = channel_transmittance(s, jit) / channel_transmittance(s, base)
    assert math.isclose(ratio, math.exp(-4 * (2e-6 / 10e-6) ** 2), rel_tol=1e-9)


def _background_block(n, seed):
    from qkdpass.link import DetectionBlock

    return DetectionBlock(
        np.arange(n, dtype=np.uint64),
        np.zeros(n, np.uint8),
        np.zeros(n, np.uint8),
        np.zeros(n, np.float64),
        np.ones(n, bool),
    )


def test_gating_background_retention_half():
    params = LinkBudgetParams()  # 800 ps gate, 1.6 ns period
    n = 1_000_000
    events = _background_block(n, 0)
    kept = apply_gating(events, 1.6e-9, params, seed=123)
    assert abs(len(kept) - 0.5 * n) < 3 * binom_sigma(n, 0.5)


def test_gating_full_window_keeps_everything():
    params = LinkBudgetParams(gate_width=1.6e-9, gate_signal_efficiency=1.0)
    events = _background_block(10_000, 0)
    kept = apply_gating(events, 1.6e-9, params, seed=1)
    assert len(kept) == 10_000


def test_gating_signal_efficiency():
    from qkdpass.link import DetectionBlock

    n = 500_000
    events = DetectionBlock(
        np.arange(n, dtype=np.uint64), np.zeros(n, np.uint8), np.zeros(n, np.uint8),
        np.zeros(n, np.float64), np.zeros(n, bool),
    )
    kept = apply_gating(events, 1.6e-9, LinkBudgetParams(), seed=3)
    assert abs(len(kept) - 0.8 * n) < 4 * binom_sigma(n, 0.8)


def test_gating_rejects_wide_gate():
    with pytest.raises(ValueError):
        apply_gating(_background_block(10, 0), 0.4e-9, LinkBudgetParams(), seed=0)


def _flat_link(eta, bg=0.0):
    return [LinkSample(time=0.0, elevation=45.0, distance=600e3, transmittance=eta, background_rate=bg)]


def test_zero_intensity_zero_dark_means_no_detections():
    params = SourceParams(w=0.0, p_signal=0.0, p_decoy=0.0, p_vacuum=1.0)
    pulses = prepare_pulses(100_000, params, seed=2)
    link_params = LinkBudgetParams(dark_count_rate=0.0)
    det = simulate_detections(pulses, _flat_link(0.5), link_params, params, seed=2)
    assert len(det) == 0


def test_poisson_click_rate():
    n = 10_000_000
    eta = 3.2e-3
    source = SourceParams()
    pulses = PulseBlock(
        np.arange(n, dtype=np.uint64),
        np.full(n, CLASS_Y2, np.uint8),
        np.full(n, BASIS_Z, np.uint8),
        np.zeros(n, np.int8),
    )
    link_params = LinkBudgetParams(dark_count_rate=0.0)
    det = simulate_detections(pulses, _flat_link(eta), link_params, source, seed=5)
    expect = n * (1.0 - math.exp(-0.8 * eta))
    assert abs(len(det) - expect) < 3 * math.sqrt(expect)


def test_click_rate_conservation_with_noise():
    n = 1_000_000
    eta = 2e-3
    bg = 3e5  # cps, gives p_noise = bg * gate_width
    source = SourceParams()
    pulses = PulseBlock(
        np.arange(n, dtype=np.uint64),
        np.full(n, CLASS_Y2, np.uint8),
        np.full(n, BASIS_Z, np.uint8),
        np.zeros(n, np.int8),
    )
    link_params = LinkBudgetParams(dark_count_rate=0.0)
    det = simulate_detections(pulses, _flat_link(eta, bg), link_params, source, seed=6)
    p_noise = bg * link_params.gate_width
    p = 1.0 - (1.0 - p_noise) * math.exp(-0.8 * eta)
    assert abs(len(det) - n * p) < 4 * binom_sigma(n, p)


def test_noiseless_matched_bits_exact():
    n = 300_000
    source = SourceParams(intrinsic_contrast_db=3000.0)
    pulses = prepare_pulses(n, source, seed=9)
    link_params = LinkBudgetParams(dark_count_rate=0.0)
    det = simulate_detections(pulses, _flat_link(0.2), link_params, source, seed=9)
    idx = det.seq.astype(int)
    matched = (det.basis == pulses.basis[idx]) & (pulses.bit[idx] >= 0)
    assert matched.any()
    assert np.array_equal(det.bit[matched], pulses.bit[idx][matched].astype(np.uint8))


def test_detection_determinism():
    source = SourceParams()
    pulses = prepare_pulses(200_000, source, seed=4)
    link_params = LinkBudgetParams()
    a = simulate_detections(pulses, _flat_link(0.01, 1e4), link_params, source, seed=42)
    b = simulate_detections(pulses, _flat_link(0.01, 1e4), link_params, source, seed=42)
    assert np.array_equal(a.seq, b.seq)
    assert np.array_equal(a.bit, b.bit)
    assert np.array_equal(a.is_background, b.is_background)


def test_mismatched_stream_rejected():
    source = SourceParams()
    pulses = prepare_pulses(10, source, seed=1)
    link = [_flat_link(0.1)[0]] * 20
    with pytest.raises(ValueError):
        simulate_detections(pulses, link, LinkBudgetParams(), source, seed=1)


def test_apply_channel_and_csv(tmp_path):
    samples = generate_pass(PassProfile(max_elevation=30.0))
    filled = apply_channel(samples, LinkBudgetParams(), background_rate=500.0)
    assert all(0 < s.transmittance <= 1 for s in filled)
    assert all(s.background_rate == 500.0 for s in filled)
    path = tmp_path / "link.csv"
    write_link_csv(path, filled)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("time_s,")
    assert len(lines) == len(filled) + 1
