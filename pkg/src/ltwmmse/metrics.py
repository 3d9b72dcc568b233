"""UatF moments, MSE, SINR, rates and the W-MMSE objective.

Expectations are sample averages over a fixed :class:`ChannelBatch`, with one
refinement: channel entries h_{l,j} that no AP observes are independent of
every beamformer, so their contribution to E|h_j^H v_k|^2 is added in closed
form (``beta[l, j] * E||v_{l,k}||^2``) instead of being sampled. This keeps
the estimators unbiased and makes the MMSE identities hold exactly on the
batch.

All rates are in nats; use :func:`to_bits` for reporting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .beamforming import BeamformerPolicy, evaluate_policy
from .channel import ChannelBatch
from .scenario import CSIStructure

__all__ = [
    "UatFMoments",
    "BlockMoments",
    "moments_from_beamformers",
    "estimate_moments",
    "estimate_block_moments",
    "combine_block_moments",
    "mse",
    "uatf_sinr",
    "uatf_rate",
    "wsr_uatf",
    "wmmse_objective",
    "optimal_scaling_mse",
    "instantaneous_rates",
    "ergodic_rate",
    "ergodic_rate_stats",
    "to_bits",
]


@dataclass(frozen=True)
class UatFMoments:
    """a[k] = E[h_k^H v_k], B[j, k] = E|h_j^H v_k|^2, c[k] = E||v_k||^2.

    ``self_var[k] = Var(h_k^H v_k)`` is computed from centred samples when
    available, avoiding the cancellation in ``B[k, k] - |a[k]|^2``.
    ``ap_power[l, k] = E||v_{l,k}||^2``. Arrays may carry leading batch axes
    for per-realization problems.
    """

    a: np.ndarray
    B: np.ndarray
    c: np.ndarray
    sample_count: int = 1
    self_var: np.ndarray | None = None
    ap_power: np.ndarray | None = None

    @property
    def num_users(self) -> int:
        return self.a.shape[-1]

    def variance(self) -> np.ndarray:
        if self.self_var is not None:
            return self.self_var
        diag = np.diagonal(self.B, axis1=-2, axis2=-1)
        return np.maximum(diag - np.abs(self.a) ** 2, 0.0)

    def to_dict(self) -> dict:
        return {
            "a_re": self.a.real.tolist(),
            "a_im": self.a.imag.tolist(),
            "B": self.B.tolist(),
            "c": self.c.tolist(),
            "sample_count": self.sample_count,
        }


def _products(H, Hobs, V, unobserved, N):
    """Per-sample moment contributions. H, Hobs, V: (S, M, K)."""
    S, M, K = V.shape
    G = Hobs.conj().transpose(0, 2, 1) @ V  # G[s, j, k] = h_j^H v_k
    ap_power = (np.abs(V) ** 2).reshape(S, M // N, N, K).sum(axis=2)  # (S, L, K)
    B = np.abs(G) ** 2 + unobserved.T @ ap_power
    a = np.diagonal(G, axis1=1, axis2=2).copy()
    return a, B, ap_power


def moments_from_beamformers(
    batch: ChannelBatch, V, serving=None, per_sample: bool = False
) -> UatFMoments:
    """Moments of beamformer samples ``V`` (S, M, K) over ``batch``.

    ``serving`` is the (L, K) observation mask; ``None`` treats every entry
    as observed (plain sample averages).
    """
    H = batch.samples
    V = np.asarray(V)
    if V.ndim == 2:
        V = np.broadcast_to(V, H.shape)
    if serving is None:
        Hobs, unobserved = H, np.zeros_like(batch.beta)
    else:
        Hobs, unobserved = batch.observed(serving), batch.unobserved_power(serving)
    a, B, ap_power = _products(H, Hobs, V, unobserved, batch.antennas_per_ap)
    if per_sample:
        return UatFMoments(
            a=a, B=B, c=ap_power.sum(axis=1), sample_count=1,
            self_var=np.zeros(a.shape), ap_power=ap_power,
        )
    a_mean = a.mean(axis=0)
    ap_mean = ap_power.mean(axis=0)
    return UatFMoments(
        a=a_mean,
        B=B.mean(axis=0),
        c=ap_mean.sum(axis=0),
        sample_count=batch.sample_count,
        self_var=(np.abs(a - a_mean) ** 2).mean(axis=0),
        ap_power=ap_mean,
    )


def estimate_moments(policy: BeamformerPolicy, batch: ChannelBatch, p=None) -> UatFMoments:
    """Sample-average moments of ``policy`` (optionally with filter power ``p``)."""
    if batch.sample_count < 1:
        raise ValueError("empty batch")
    V = evaluate_policy(policy, batch.samples, p)
    return moments_from_beamformers(batch, V, policy.csi.serving)


def _weighted_total(m: UatFMoments, p):
    """(signal, interference + noise, total) with total = signal + rest."""
    p = np.asarray(p, dtype=float)
    sig = p * np.abs(m.a) ** 2
    K = m.num_users
    offdiag = m.B * (1.0 - np.eye(K))
    rest = p * m.variance() + np.sum(p[..., :, None] * offdiag, axis=-2) + m.c
    return sig, rest, sig + rest


def _pick(x, k):
    return x if k is None else x[..., k]


def mse(m: UatFMoments, p, k: int | None = None):
    """E||P^{1/2} H^H v_k - e_k||^2 + E||v_k||^2, expanded in the moments."""
    # regrouped as (interference + noise) + |sqrt(p_k) a_k - 1|^2 to avoid cancellation
    _, rest, _ = _weighted_total(m, p)
    val = rest + np.abs(np.sqrt(np.asarray(p, dtype=float)) * m.a - 1.0) ** 2
    return _pick(val, k)


def uatf_sinr(m: UatFMoments, p, k: int | None = None):
    sig, rest, _ = _weighted_total(m, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(m.c > 0, sig / np.where(rest > 0, rest, 1.0), 0.0)
    return _pick(val, k)


def uatf_rate(m: UatFMoments, p, k: int | None = None):
    return np.log1p(uatf_sinr(m, p, k))


def wsr_uatf(m: UatFMoments, p, omega=None):
    rates = uatf_rate(m, p)
    if omega is None:
        return np.sum(rates, axis=-1)
    return np.sum(np.asarray(omega) * rates, axis=-1)


def wmmse_objective(m: UatFMoments, p, d, omega=None):
    """sum_k omega_k (log d_k - d_k MSE_k)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("W-MMSE weights must be strictly positive")
    omega = np.ones(m.num_users) if omega is None else np.asarray(omega)
    return np.sum(omega * (np.log(d) - d * mse(m, p)), axis=-1)


def optimal_scaling_mse(m: UatFMoments, p, k: int | None = None):
    """min over complex beta of MSE(beta v_k) = 1 - p_k|a_k|^2 / (sum_j p_j B_jk + c_k)."""
    sig, rest, total = _weighted_total(m, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(total > 0, rest / np.where(total > 0, total, 1.0), 1.0)
    return _pick(val, k)


def instantaneous_rates(H, V, p) -> np.ndarray:
    """log(1 + p_k|h_k^H v_k|^2 / (sum_{j!=k} p_j|h_j^H v_k|^2 + ||v_k||^2)), shape (S, K).

    Realizations where v_k = 0 contribute 0.
    """
    H = np.asarray(H)
    V = np.asarray(V)
    if H.ndim == 2:
        H, V = H[None], V[None]
    p = np.asarray(p, dtype=float)
    pb = p if p.ndim == 2 else p[None]
    G2 = np.abs(H.conj().transpose(0, 2, 1) @ V) ** 2
    K = G2.shape[-1]
    sig = pb * np.diagonal(G2, axis1=1, axis2=2)
    interf = np.sum(pb[:, :, None] * G2 * (1.0 - np.eye(K)), axis=1)
    noise = np.sum(np.abs(V) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(noise > 0, np.log1p(sig / np.where(noise > 0, interf + noise, 1.0)), 0.0)


def ergodic_rate_stats(batch: ChannelBatch, V, p) -> tuple[np.ndarray, np.ndarray]:
    """Per-user sample mean and standard error of the instantaneous rates."""
    r = instantaneous_rates(batch.samples, V, p)
    S = r.shape[0]
    se = r.std(axis=0, ddof=1) / math.sqrt(S) if S > 1 else np.full(r.shape[1], np.inf)
    return r.mean(axis=0), se


def ergodic_rate(policy: BeamformerPolicy, batch: ChannelBatch, p, k: int | None = None):
    """Monte Carlo ergodic rate of ``policy`` at transmit powers ``p`` (nats)."""
    if batch.sample_count < 1:
        raise ValueError("empty batch")
    V = evaluate_policy(policy, batch.samples)
    mean, _ = ergodic_rate_stats(batch, V, p)
    return _pick(mean, k)


def to_bits(nats):
    return np.asarray(nats) / math.log(2.0)


@dataclass(frozen=True)
class BlockMoments:
    """Statistics of the per-AP soft estimates g_{l,j,k} = h_{l,j}^H v_{l,k}.

    For user k with serving APs ``aps[k]`` (Q_k of them), index q runs over
    those APs:

    mean[k][q]        E[g_{q,k,k}]
    gram[k][j, q, r]  E[conj(g_{q,j,k}) g_{r,j,k}]
    noise[k][q]       E||v_{q,k}||^2
    self_cov[k]       covariance of the vector (g_{q,k,k})_q
    """

    aps: tuple[tuple[int, ...], ...]
    num_aps: int
    mean: list
    gram: list
    noise: list
    self_cov: list
    sample_count: int

    def scaled(self, factor: float) -> "BlockMoments":
        return BlockMoments(
            aps=self.aps,
            num_aps=self.num_aps,
            mean=[factor * x for x in self.mean],
            gram=[factor * x for x in self.gram],
            noise=[factor * x for x in self.noise],
            self_cov=[factor * x for x in self.self_cov],
            sample_count=self.sample_count,
        )


def estimate_block_moments(batch: ChannelBatch, V, csi: CSIStructure) -> BlockMoments:
    """Block statistics of beamformer samples ``V`` (S, M, K) on ``batch``."""
    N = csi.antennas_per_ap
    Hobs = batch.observed(csi.serving)
    unobserved = batch.unobserved_power(csi.serving)
    S = batch.sample_count
    means, grams, noises, covs = [], [], [], []
    for k, aps in enumerate(csi.serving_sets):
        Q = len(aps)
        rows = csi.cluster_antennas(k)
        Hc = Hobs[:, rows, :].reshape(S, Q, N, -1)
        Vk = V[:, rows, k].reshape(S, Q, N)
        g = np.einsum("sqnj,sqn->sjq", Hc.conj(), Vk)  # (S, K, Q)
        noise = (np.abs(Vk) ** 2).sum(axis=2).mean(axis=0)
        gram = np.einsum("sjq,sjr->jqr", g.conj(), g) / S
        extra = unobserved[list(aps), :].T * noise[None, :]  # (K, Q)
        idx = np.arange(Q)
        gram[:, idx, idx] += extra
        gkk = g[:, k, :]
        mean = gkk.mean(axis=0)
        centred = gkk - mean
        means.append(mean)
        grams.append(gram)
        noises.append(noise)
        covs.append(np.einsum("sq,sr->qr", centred.conj(), centred) / S)
    return BlockMoments(
        aps=csi.serving_sets, num_aps=csi.num_aps, mean=means, gram=grams,
        noise=noises, self_cov=covs, sample_count=S,
    )


def combine_block_moments(bm: BlockMoments, weights) -> UatFMoments:
    """Moments of the beamformer whose AP-l block of v_k is scaled by weights[l, k]."""
    K = len(bm.aps)
    a = np.zeros(K, dtype=complex)
    B = np.zeros((K, K))
    c = np.zeros(K)
    var = np.zeros(K)
    ap_power = np.zeros((bm.num_aps, K))
    for k, aps in enumerate(bm.aps):
        w = np.asarray(weights)[list(aps), k]
        a[k] = bm.mean[k] @ w
        B[:, k] = np.einsum("q,jqr,r->j", w.conj(), bm.gram[k], w).real
        ap_power[list(aps), k] = np.abs(w) ** 2 * bm.noise[k]
        c[k] = ap_power[:, k].sum()
        var[k] = max((w.conj() @ bm.self_cov[k] @ w).real, 0.0)
    return UatFMoments(a=a, B=B, c=c, sample_count=bm.sample_count, self_var=var, ap_power=ap_power)
