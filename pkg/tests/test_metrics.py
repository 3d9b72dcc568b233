import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import random_instance
from ltwmmse.beamforming import BeamformerPolicy, Strategy, centralized_mmse, evaluate_policy
from ltwmmse.channel import ChannelBatch
from ltwmmse.metrics import (
    UatFMoments,
    combine_block_moments,
    ergodic_rate,
    ergodic_rate_stats,
    estimate_block_moments,
    estimate_moments,
    instantaneous_rates,
    moments_from_beamformers,
    mse,
    optimal_scaling_mse,
    to_bits,
    uatf_rate,
    uatf_sinr,
    wmmse_objective,
    wsr_uatf,
)
from ltwmmse.scenario import build_csi_structure


def _scalar(v):
    batch = ChannelBatch.from_samples(np.ones((1, 1, 1)))
    return moments_from_beamformers(batch, np.full((1, 1, 1), v, dtype=complex))


def test_scalar_examples():
    m = _scalar(0.5)
    assert mse(m, [1.0], 0) == pytest.approx(0.5, abs=1e-15)
    assert uatf_sinr(m, [1.0], 0) == pytest.approx(1.0, abs=1e-15)
    assert uatf_rate(m, [1.0], 0) == pytest.approx(math.log(2), abs=1e-15)
    assert optimal_scaling_mse(m, [1.0], 0) == pytest.approx(0.5, abs=1e-15)
    assert mse(_scalar(0.4), [1.0], 0) == pytest.approx(0.52, abs=1e-15)


def _naive_moments(H, V):
    """Direct per-definition sample averages with double loops."""
    S, M, K = H.shape
    a = np.zeros(K, complex)
    B = np.zeros((K, K))
    c = np.zeros(K)
    for s in range(S):
        for k in range(K):
            a[k] += np.vdot(H[s, :, k], V[s, :, k]) / S
            c[k] += np.vdot(V[s, :, k], V[s, :, k]).real / S
            for j in range(K):
                B[j, k] += abs(np.vdot(H[s, :, j], V[s, :, k])) ** 2 / S
    return a, B, c


def test_moments_match_definitions():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(6, 4, 3)) + 1j * rng.normal(size=(6, 4, 3))
    V = rng.normal(size=(6, 4, 3)) + 1j * rng.normal(size=(6, 4, 3))
    m = moments_from_beamformers(ChannelBatch.from_samples(H, antennas_per_ap=2), V)
    a, B, c = _naive_moments(H, V)
    np.testing.assert_allclose(m.a, a, atol=1e-12)
    np.testing.assert_allclose(m.B, B, atol=1e-12)
    np.testing.assert_allclose(m.c, c, atol=1e-12)
    np.testing.assert_allclose(m.variance(), np.diag(B) - np.abs(a) ** 2, atol=1e-12)


def test_unobserved_entries_enter_in_closed_form():
    # Monte Carlo check: with many samples, replacing unobserved entries by their variance agrees with
    # plain sampling of the full channel
    beta, csi, batch = random_instance(3, L=3, N=1, K=3, Q=1, S=40_000)
    V = centralized_mmse(batch.samples, np.ones(3), csi, batch.unobserved_power(csi.serving))
    semi = moments_from_beamformers(batch, V, csi.serving)
    full = moments_from_beamformers(batch, V)
    np.testing.assert_allclose(semi.B, full.B, rtol=0.05, atol=1e-3 * semi.B.max())
    np.testing.assert_allclose(semi.a, full.a, atol=1e-12)


def test_degenerate_expectations():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2))
    v = rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2))
    batch = ChannelBatch.from_samples(np.repeat(h[None], 5, axis=0), beta=np.ones((3, 2)))
    m = moments_from_beamformers(batch, v)
    np.testing.assert_allclose(m.a, np.einsum("mk,mk->k", h.conj(), v), atol=1e-12)
    # deterministic channel: ergodic rate equals UatF rate
    p = np.array([1.0, 3.0])
    np.testing.assert_allclose(ergodic_rate_stats(batch, np.broadcast_to(v, batch.samples.shape), p)[0], uatf_rate(m, p), atol=1e-12)
    single = moments_from_beamformers(ChannelBatch.from_samples(h[None]), v)
    np.testing.assert_allclose(uatf_rate(single, p), instantaneous_rates(h, v, p)[0], atol=1e-12)


def test_zero_beamformer():
    rng = np.random.default_rng(2)
    H = rng.normal(size=(4, 3, 2)) + 0j
    V = rng.normal(size=(4, 3, 2)) + 0j
    V[..., 1] = 0
    m = moments_from_beamformers(ChannelBatch.from_samples(H, beta=np.ones((3, 2))), V)
    p = np.ones(2)
    assert m.a[1] == 0 and np.all(m.B[:, 1] == 0) and m.c[1] == 0
    assert mse(m, p, 1) == 1.0
    assert uatf_sinr(m, p, 1) == 0.0
    assert np.all(instantaneous_rates(H, V, p)[:, 1] == 0)
    zero = moments_from_beamformers(ChannelBatch.from_samples(H, beta=np.ones((3, 2))), np.zeros_like(V))
    assert wsr_uatf(zero, p) == 0.0


def test_zero_power_user():
    _, csi, batch = random_instance(0, K=4, S=20)
    V = centralized_mmse(batch.samples, np.ones(4), csi)
    m = moments_from_beamformers(batch, V, csi.serving)
    p = np.array([0.0, 1.0, 1.0, 1.0])
    assert uatf_sinr(m, p, 0) == 0.0
    off = sum(p[j] * m.B[j, 0] for j in range(1, 4))
    assert mse(m, p, 0) == pytest.approx(1.0 + off + m.c[0], rel=1e-12)


def _random_moments(rng, K, S=5, M=3):
    H = rng.normal(size=(S, M, K)) + 1j * rng.normal(size=(S, M, K))
    V = rng.normal(size=(S, M, K)) + 1j * rng.normal(size=(S, M, K))
    return moments_from_beamformers(ChannelBatch.from_samples(H, beta=np.ones((M, K))), V)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_mse_expansion_and_invariants(seed, K):
    rng = np.random.default_rng(seed)
    m = _random_moments(rng, K)
    p = rng.uniform(0, 10, K)
    expanded = p @ m.B - 2 * np.sqrt(p) * m.a.real + 1 + m.c
    np.testing.assert_allclose(mse(m, p), expanded, rtol=1e-10, atol=1e-10)
    assert np.all(np.diag(m.B) >= np.abs(m.a) ** 2 * (1 - 1e-12))
    assert np.all(mse(m, p) >= optimal_scaling_mse(m, p) * (1 - 1e-12))
    np.testing.assert_allclose(optimal_scaling_mse(m, p) * (1 + uatf_sinr(m, p)), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_sinr_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(4, 3, 2)) + 1j * rng.normal(size=(4, 3, 2))
    V = rng.normal(size=(4, 3, 2)) + 1j * rng.normal(size=(4, 3, 2))
    batch = ChannelBatch.from_samples(H, beta=np.ones((3, 2)))
    p = rng.uniform(0.1, 5, 2)
    np.testing.assert_allclose(
        uatf_sinr(moments_from_beamformers(batch, scale * V), p),
        uatf_sinr(moments_from_beamformers(batch, V), p), rtol=1e-10,
    )


def test_mmse_output_is_optimally_scaled():
    _, csi, batch = random_instance(5, S=100)
    p = np.random.default_rng(5).uniform(1, 10, 8)
    V = centralized_mmse(batch.samples, p, csi, batch.unobserved_power(csi.serving))
    m = moments_from_beamformers(batch, V, csi.serving)
    np.testing.assert_allclose(mse(m, p), optimal_scaling_mse(m, p), rtol=1e-10)


def test_wmmse_objective_examples():
    rng = np.random.default_rng(3)
    m = _random_moments(rng, 3)
    p = rng.uniform(0.5, 5, 3)
    omega = rng.uniform(0.5, 2, 3)
    d_star = 1.0 / mse(m, p)
    general = np.sum(omega * (-np.log(mse(m, p)) - 1.0))
    assert wmmse_objective(m, p, d_star, omega) == pytest.approx(general, rel=1e-13)
    # for MSE-optimal beamformers the objective is the UatF sum rate minus sum(omega)
    _, csi, batch = random_instance(3, L=2, N=2, K=3, Q=1, S=50)
    V = centralized_mmse(batch.samples, p, csi, batch.unobserved_power(csi.serving))
    mm = moments_from_beamformers(batch, V, csi.serving)
    d_mm = 1.0 / mse(mm, p)
    offset = wmmse_objective(mm, p, d_mm, omega) - (wsr_uatf(mm, p, omega) - omega.sum())
    assert abs(offset) <= 1e-12
    assert wmmse_objective(m, p, np.ones(3), omega) == pytest.approx(-np.sum(omega * mse(m, p)), rel=1e-12)
    for eps in (1e-3, -1e-3):
        assert wmmse_objective(m, p, d_star * (1 + eps), omega) < wmmse_objective(m, p, d_star, omega)
    with pytest.raises(ValueError):
        wmmse_objective(m, p, np.zeros(3))
    assert wsr_uatf(m, p) == pytest.approx(uatf_rate(m, p).sum())


@pytest.mark.parametrize("case", ["centralized", "distributed", "small_cells"])
def test_uatf_is_below_ergodic(case):
    _, csi, batch = random_instance(8, case=case, S=2000)
    policy = BeamformerPolicy(
        Strategy.FIXED_FULL_POWER_MMSE, csi, filter_power=np.full(8, 10.0),
        unobserved=batch.unobserved_power(csi.serving),
    )
    V = evaluate_policy(policy, batch.samples)
    p = np.full(8, 10.0)
    mean, se = ergodic_rate_stats(batch, V, p)
    assert np.all(uatf_rate(estimate_moments(policy, batch), p) <= mean + 3 * se)
    np.testing.assert_allclose(ergodic_rate(policy, batch, p), mean)
    assert ergodic_rate(policy, batch, p, 2) == mean[2]


def test_block_moments_combine_to_full_moments():
    _, csi, batch = random_instance(9, L=4, N=2, K=6, Q=3, case="distributed", S=50)
    from ltwmmse.beamforming import local_mmse_all

    V = local_mmse_all(batch.samples, np.full(6, 2.0), csi, batch.unobserved_power(csi.serving))
    rng = np.random.default_rng(0)
    W = (rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))) * csi.serving
    direct = moments_from_beamformers(batch, V * np.repeat(W, 2, axis=0), csi.serving)
    combined = combine_block_moments(estimate_block_moments(batch, V, csi), W)
    np.testing.assert_allclose(combined.a, direct.a, atol=1e-10)
    np.testing.assert_allclose(combined.B, direct.B, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(combined.c, direct.c, rtol=1e-10)
    np.testing.assert_allclose(combined.variance(), direct.variance(), rtol=1e-8, atol=1e-10)


def test_bits_and_export():
    assert to_bits(math.log(2)) == pytest.approx(1.0)
    m = _scalar(0.5)
    assert json.loads(json.dumps(m.to_dict()))["c"] == [0.25]
    assert isinstance(m, UatFMoments)


def test_csi_mask_used_by_estimate_moments():
    csi = build_csi_structure("centralized", [(0,), (1,)], num_aps=2)
    H = np.ones((3, 2, 2), dtype=complex)
    batch = ChannelBatch.from_samples(H, beta=np.full((2, 2), 0.5))
    policy = BeamformerPolicy(Strategy.CENTRALIZED_MMSE, csi, filter_power=np.ones(2),
                              unobserved=batch.unobserved_power(csi.serving))
    m = estimate_moments(policy, batch)
    # v_1 lives on AP 0 only; the unobserved h_{0,2} contributes 0.5 * |v|^2 instead of |1 * v|^2
    v = evaluate_policy(policy, H)[0, 0, 0]
    assert m.B[1, 0] == pytest.approx(0.5 * abs(v) ** 2, rel=1e-12)
