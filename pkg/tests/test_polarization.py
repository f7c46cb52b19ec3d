import math

import numpy as np
import pytest

from oracles import random_rotation, retarder_oracle
from qkdpass.polarization import (
    HWP,
    QWP,
    STOKES_D,
    STOKES_H,
    STOKES_R,
    PolarizationError,
    WavePlateSetting,
    apparent_roll,
    basis_rotation_hwp,
    compose,
    rotation_about,
    solve_compensation,
    waveplate_rotation,
    write_waveplate_csv,
)


def test_waveplate_rotation_is_proper():
    for kind in (QWP, HWP):
        for angle in np.linspace(0, math.pi, 17):
            m = waveplate_rotation(WavePlateSetting(kind, angle))
            assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(m) - 1.0) < 1e-12


def test_hwp_at_zero_flips_diagonal_fixes_h():
    m = waveplate_rotation(WavePlateSetting(HWP, 0.0))
    assert np.allclose(m @ STOKES_D, -STOKES_D, atol=1e-12)
    assert np.allclose(m @ STOKES_H, STOKES_H, atol=1e-12)


def test_qwp_at_zero_maps_circular_to_linear():
    m = waveplate_rotation(WavePlateSetting(QWP, 0.0))
    assert np.allclose(m @ STOKES_R, np.array([0.0, -1.0, 0.0]), atol=1e-12)


def test_waveplates_match_mueller_oracle():
    for angle in np.linspace(0.0, math.pi, 13):
        q = waveplate_rotation(WavePlateSetting(QWP, angle))
        h = waveplate_rotation(WavePlateSetting(HWP, angle))
        assert np.allclose(q, retarder_oracle(angle, math.pi / 2.0), atol=1e-12)
        assert np.allclose(h, retarder_oracle(angle, math.pi), atol=1e-12)


def test_two_quarter_waves_make_a_half_wave():
    for angle in (0.0, 0.3, 1.1, 2.9):
        q = waveplate_rotation(WavePlateSetting(QWP, angle))
        h = waveplate_rotation(WavePlateSetting(HWP, angle))
        assert np.allclose(q @ q, h, atol=1e-12)


def test_identity_inputs_give_identity_composition():
    settings = solve_compensation(STOKES_R, STOKES_H, STOKES_D)
    m = compose(*settings)
    assert np.allclose(m, np.eye(3), atol=1e-9)


def test_random_rotation_roundtrip():
    rs = np.random.default_rng(2024)
    for _ in range(300):
        g = random_rotation(rs)
        settings = solve_compensation(g @ STOKES_R, g @ STOKES_H, g @ STOKES_D)
        m = compose(*settings)
        assert np.linalg.norm(m @ (g @ STOKES_R) - STOKES_R) < 1e-9
        assert np.linalg.norm(m @ (g @ STOKES_H) - STOKES_H) < 1e-9
        assert np.linalg.norm(m @ (g @ STOKES_D) - STOKES_D) < 1e-9
        for s in settings:
            assert 0.0 <= s.fast_axis_angle < math.pi


def test_stepwise_structure():
    rs = np.random.default_rng(7)
    for _ in range(50):
        g = random_rotation(rs)
        r_img, h_img = g @ STOKES_R, g @ STOKES_H
        q1, q2, hwp = solve_compensation(r_img, h_img, g @ STOKES_D)
        m1 = waveplate_rotation(q1)
        assert abs((m1 @ r_img)[2]) < 1e-9
        m2 = waveplate_rotation(q2) @ m1
        assert abs(abs((m2 @ r_img)[2]) - 1.0) < 1e-9
        assert abs((m2 @ h_img)[2]) < 1e-9
        m3 = waveplate_rotation(hwp) @ m2
        assert np.linalg.norm(m3 @ h_img - STOKES_H) < 1e-9


def test_antipodal_circular_image():
    # R image on the opposite pole: solver must still succeed.
    g = rotation_about(np.array([1.0, 0.0, 0.0]), math.pi)
    settings = solve_compensation(g @ STOKES_R, g @ STOKES_H, g @ STOKES_D)
    m = compose(*settings)
    assert np.linalg.norm(m @ (g @ STOKES_R) - STOKES_R) < 1e-9
    assert np.linalg.norm(m @ (g @ STOKES_H) - STOKES_H) < 1e-9


def test_polar_intermediate_h_image():
    # Rotation sending H to a pole exercises the second degenerate branch.
    g = rotation_about(np.array([0.0, 1.0, 0.0]), math.pi / 2.0)
    assert abs(abs((g @ STOKES_H)[2]) - 1.0) < 1e-12
    settings = solve_compensation(g @ STOKES_R, g @ STOKES_H, g @ STOKES_D)
    m = compose(*settings)
    for ref in (STOKES_R, STOKES_H, STOKES_D):
        assert np.linalg.norm(m @ (g @ ref) - ref) < 1e-9


def test_non_orthogonal_triad_rejected():
    with pytest.raises(PolarizationError):
        solve_compensation(STOKES_R, STOKES_R, STOKES_D)
    # Left-handed (reflected) triad violates the unitary fiber model.
    with pytest.raises(PolarizationError):
        solve_compensation(STOKES_R, STOKES_H, -STOKES_D)


def test_noisy_triad_reorthonormalized():
    rs = np.random.default_rng(5)
    g = random_rotation(rs)
    noise = 1e-8
    settings = solve_compensation(
        g @ STOKES_R + noise, g @ STOKES_H - noise, g @ STOKES_D + noise
    )
    m = compose(*settings)
    assert np.linalg.norm(m @ (g @ STOKES_R) - STOKES_R) < 1e-6


def test_basis_rotation_hwp_theta_zero_fixes_h():
    setting = basis_rotation_hwp(0.0)
    m = waveplate_rotation(setting) @ apparent_roll(0.0)
    assert np.allclose(m @ STOKES_H, STOKES_H, atol=1e-12)


def test_basis_rotation_hwp_restores_rotated_d():
    theta = math.pi / 4.0
    drifted = apparent_roll(theta) @ STOKES_D
    m = waveplate_rotation(basis_rotation_hwp(theta))
    assert np.linalg.norm(m @ drifted - STOKES_D) < 1e-12


def test_basis_rotation_hwp_inverts_drift_for_all_states():
    rs = np.random.default_rng(3)
    for theta in rs.uniform(-4 * math.pi, 4 * math.pi, 25):
        m = waveplate_rotation(basis_rotation_hwp(theta)) @ apparent_roll(theta)
        assert np.allclose(m, np.eye(3), atol=1e-9)


def test_basis_rotation_hwp_pi_periodicity():
    for theta in (0.0, 0.4, 1.9, 3.0):
        a = waveplate_rotation(basis_rotation_hwp(theta))
        b = waveplate_rotation(basis_rotation_hwp(theta + math.pi))
        assert np.allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        basis_rotation_hwp(math.nan)


def test_setting_angle_normalized():
    s = WavePlateSetting(QWP, 4.0 * math.pi + 0.5)
    assert 0.0 <= s.fast_axis_angle < math.pi
    assert math.isclose(s.fast_axis_angle, 0.5, abs_tol=1e-12)
    with pytest.raises(ValueError):
        WavePlateSetting("full", 0.1)


def test_waveplate_csv(tmp_path):
    rows = [
        (0.0, WavePlateSetting(QWP, 0.1), WavePlateSetting(QWP, 0.2), WavePlateSetting(HWP, 0.3)),
        (1.0, WavePlateSetting(QWP, 0.4), WavePlateSetting(QWP, 0.5), WavePlateSetting(HWP, 0.6)),
    ]
    path = tmp_path / "plates.csv"
    write_waveplate_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_s,qwp1_rad,qwp2_rad,hwp_rad"
    assert len(lines) == 3
