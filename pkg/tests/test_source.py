import math

import numpy as np
import pytest

from qkdpass.source import (
    BASIS_X,
    BASIS_Z,
    CLASS_NAMES,
    CLASS_O,
    CLASS_X1,
    CLASS_X2,
    CLASS_Y1,
    CLASS_Y2,
    NO_BIT,
    SourceParams,
    VirtualPulseSource,
    intrinsic_error_prob,
    prepare_pulses,
    pulse_fields,
    read_pulse_records,
    window_class_counts,
    write_pulse_records,
)


def binom_sigma(n, p):
    return math.sqrt(n * p * (1 - p))


def test_default_params_match_design_point():
    p = SourceParams()
    assert (p.mu, p.nu, p.w) == (0.8, 0.1, 0.001)
    assert (p.p_signal, p.p_decoy, p.p_vacuum) == (0.5, 0.25, 0.25)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        SourceParams(mu=0.1, nu=0.1)
    with pytest.raises(ValueError):
        SourceParams(w=-0.1)
    with pytest.raises(ValueError):
        SourceParams(p_signal=0.6, p_decoy=0.25, p_vacuum=0.25)
    with pytest.raises(ValueError):
        SourceParams(intrinsic_contrast_db=0.0)


def test_class_frequencies_converge():
    n = 1_000_000
    params = SourceParams()
    block = prepare_pulses(n, params, seed=11)
    counts = block.class_counts()
    # vacuum frequency within 3 sigma of 0.25
    assert abs(counts[CLASS_O] - 0.25 * n) < 3 * binom_sigma(n, 0.25)
    for cls, p in ((CLASS_X1, 0.125), (CLASS_Y1, 0.25), (CLASS_X2, 0.125), (CLASS_Y2, 0.25)):
        assert abs(counts[cls] - p * n) < 4 * binom_sigma(n, p)


def test_degenerate_all_vacuum():
    params = SourceParams(p_signal=0.0, p_decoy=0.0, p_vacuum=1.0)
    block = prepare_pulses(10_000, params, seed=3)
    assert np.all(block.klass == CLASS_O)
    assert np.all(block.bit == NO_BIT)


def test_bit_bias_within_binomial():
    n = 1_000_000
    block = prepare_pulses(n, SourceParams(), seed=5)
    for cls in (CLASS_X1, CLASS_Y1, CLASS_X2, CLASS_Y2):
        bits = block.bit[block.klass == cls]
        m = len(bits)
        assert abs(bits.sum() - 0.5 * m) < 4 * binom_sigma(m, 0.5)


def test_class_basis_consistency():
    block = prepare_pulses(200_000, SourceParams(), seed=8)
    assert np.all(block.basis[np.isin(block.klass, (CLASS_X1, CLASS_Y1))] == BASIS_X)
    assert np.all(block.basis[np.isin(block.klass, (CLASS_X2, CLASS_Y2))] == BASIS_Z)
    assert np.all(block.bit[block.klass != CLASS_O] != NO_BIT)


def test_mean_intensity_tally():
    params = SourceParams()
    block = prepare_pulses(500_000, params, seed=21)
    empirical = params.class_intensities()[block.klass].mean()
    assert abs(empirical - params.mean_intensity) < 2e-3


def test_seed_determinism_and_virtual_consistency():
    params = SourceParams()
    a = prepare_pulses(50_000, params, seed=77)
    b = prepare_pulses(50_000, params, seed=77)
    assert np.array_equal(a.klass, b.klass)
    assert np.array_equal(a.bit, b.bit)
    # Random access matches the materialised stream.
    seqs = np.array([17, 999, 31234], dtype=np.uint64)
    klass, basis, bit = pulse_fields(77, seqs, params)
    assert np.array_equal(klass, a.klass[seqs.astype(int)])
    assert np.array_equal(basis, a.basis[seqs.astype(int)])
    assert np.array_equal(bit, a.bit[seqs.astype(int)])
    c = prepare_pulses(50_000, params, seed=78)
    assert not np.array_equal(a.klass, c.klass)


def test_window_counts_exact_and_analytic():
    params = SourceParams()
    exact = window_class_counts(4, params, 1000, 51_000)
    block = prepare_pulses(51_000, params, seed=4)
    assert np.array_equal(exact, np.bincount(block.klass[1000:], minlength=5))
    big = window_class_counts(4, params, 0, 10**10)
    assert big.sum() == 10**10
    assert abs(big[CLASS_O] / 10**10 - 0.25) < 1e-3


def test_record_file_roundtrip(tmp_path):
    block = prepare_pulses(10_000, SourceParams(), seed=13)
    path = tmp_path / "pulses.bin"
    write_pulse_records(path, block)
    assert path.stat().st_size == 16 + 9 * len(block)
    back = read_pulse_records(path)
    assert np.array_equal(back.seq, block.seq)
    assert np.array_equal(back.klass, block.klass)
    assert np.array_equal(back.basis, block.basis)
    assert np.array_equal(back.bit, block.bit)


def test_record_view():
    block = prepare_pulses(100, SourceParams(), seed=1)
    rec = block.record(3)
    assert rec.sequence_number == 3
    assert rec.class_name in CLASS_NAMES
    if rec.source_class == CLASS_O:
        assert rec.bit is None


def test_intrinsic_error_prob_examples():
    # 25 dB -> 1/(1 + 10^2.5), evaluated directly
    assert math.isclose(intrinsic_error_prob(25.0), 1.0 / (1.0 + 10.0**2.5), rel_tol=1e-12)
    assert abs(intrinsic_error_prob(25.0) - 3.15e-3) < 5e-5
    assert intrinsic_error_prob(0.0) == 0.5
    assert intrinsic_error_prob(math.inf) == 0.0
    with pytest.raises(ValueError):
        intrinsic_error_prob(-1.0)


def test_sent_counts_memo_copies():
    src = VirtualPulseSource(1, SourceParams(), 100_000)
    a = src.sent_counts(0, 100_000)
    a[0] = -99
    b = src.sent_counts(0, 100_000)
    assert b[0] != -99
