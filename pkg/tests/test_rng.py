import numpy as np

from qkdpass import rng


def test_counter_hash_deterministic():
    key = rng.derive_key(123, "stream")
    a = rng.hash_u64(key, np.arange(1000))
    b = rng.hash_u64(key, np.arange(1000))
    assert np.array_equal(a, b)


def test_slices_match_full_stream():
    key = rng.derive_key(9, "x")
    full = rng.uniform(key, np.arange(10_000))
    part = rng.uniform(key, np.arange(4_000, 6_000))
    assert np.array_equal(full[4_000:6_000], part)


def test_derived_keys_independent():
    a = rng.uniform(rng.derive_key(1, "a"), np.arange(20_000))
    b = rng.uniform(rng.derive_key(1, "b"), np.arange(20_000))
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03
    assert rng.derive_key(1, "a", 1) != rng.derive_key(1, "a1")


def test_uniform_moments():
    u = rng.uniform(rng.derive_key(7, "mom"), np.arange(200_000))
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1.0 / 12.0) < 0.002
    assert u.min() >= 0.0 and u.max() < 1.0


def test_bits_balance():
    b = rng.bits(rng.derive_key(3, "bits"), np.arange(100_000))
    assert set(np.unique(b)) <= {0, 1}
    assert abs(b.mean() - 0.5) < 0.01


def test_byte_stream_length_and_prefix():
    s1 = rng.byte_stream(42, 33)
    s2 = rng.byte_stream(42, 64)
    assert len(s1) == 33
    assert s2[:33] == s1
