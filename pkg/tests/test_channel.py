import numpy as np
import pytest

from ltwmmse.channel import ChannelBatch, load_batch, sample_channels, save_batch, split_batch


def test_unit_variance_entries():
    # S=1e4 unit-variance entries: the mean of |h|^2 is Gamma(S, 1/S), sd 0.01, so [0.97, 1.03] is a 3-sigma band
    batch = sample_channels(np.ones((2, 3)), 10_000, seed=1, antennas_per_ap=2)
    power = np.mean(np.abs(batch.samples) ** 2, axis=0)
    assert np.all((power > 0.97) & (power < 1.03))
    # circular symmetry: real and imaginary parts carry half the power each
    assert np.mean(batch.samples.real**2) == pytest.approx(0.5, abs=0.01)
    assert abs(np.mean(batch.samples)) < 0.01


def test_variance_follows_beta():
    beta = np.array([[1e-12, 4.0], [2.0, 1.0]])
    batch = sample_channels(beta, 4000, seed=2, antennas_per_ap=3)
    power = np.mean(np.abs(batch.samples) ** 2, axis=0).reshape(2, 3, 2).mean(axis=1)
    np.testing.assert_allclose(power, beta, rtol=0.06)
    assert power[0, 0] < 1e-10


def test_worker_count_does_not_change_batch():
    beta = np.random.default_rng(0).exponential(size=(3, 4))
    a = sample_channels(beta, 37, seed=5, antennas_per_ap=2, workers=1)
    b = sample_channels(beta, 37, seed=5, antennas_per_ap=2, workers=4)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = sample_channels(beta, 37, seed=6, antennas_per_ap=2)
    assert not np.allclose(a.samples, c.samples)


def test_split_rules():
    batch = sample_channels(np.ones((1, 1)), 100, seed=0)
    fit, ev = split_batch(batch, 0.5)
    assert (fit.sample_count, ev.sample_count) == (50, 50)
    np.testing.assert_array_equal(np.concatenate([fit.samples, ev.samples]), batch.samples)
    small = sample_channels(np.ones((1, 1)), 3, seed=0)
    assert [b.sample_count for b in split_batch(small, 0.5)] == [1, 2]
    with pytest.raises(ValueError):
        split_batch(small, 0.2)
    with pytest.raises(ValueError):
        split_batch(small, 1.0)


def test_observed_masks():
    beta = np.array([[1.0, 2.0], [3.0, 4.0]])
    batch = sample_channels(beta, 5, seed=0, antennas_per_ap=2)
    serving = np.array([[True, False], [True, True]])
    obs = batch.observed(serving)
    assert np.all(obs[:, 0:2, 1] == 0)
    np.testing.assert_array_equal(obs[:, 2:4, :], batch.samples[:, 2:4, :])
    np.testing.assert_array_equal(batch.unobserved_power(serving), [[0.0, 2.0], [0.0, 0.0]])


def test_binary_round_trip(tmp_path):
    batch = sample_channels(np.random.default_rng(1).exponential(size=(2, 3)), 7, seed=12, antennas_per_ap=2)
    save_batch(tmp_path / "b.bin", batch)
    back = load_batch(tmp_path / "b.bin")
    np.testing.assert_array_equal(back.samples, batch.samples)
    np.testing.assert_array_equal(back.beta, batch.beta)
    assert (back.antennas_per_ap, back.seed) == (2, 12)
    (tmp_path / "bad.bin").write_bytes(b"garbage!" * 10)
    with pytest.raises(ValueError):
        load_batch(tmp_path / "bad.bin")


def test_inconsistent_shapes_rejected():
    with pytest.raises(ValueError):
        ChannelBatch(samples=np.zeros((2, 4, 3), complex), beta=np.ones((3, 3)), antennas_per_ap=2)
    with pytest.raises(ValueError):
        sample_channels(np.ones((1, 1)), 0, seed=0)
