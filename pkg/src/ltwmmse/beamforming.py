"""Beamformer families that respect the information constraints.

Shapes used throughout: a realization ``H`` is (M, K) and a batch is
(S, M, K); a beamformer sample ``V`` has the same shape with column ``k``
equal to ``v_k``. Power vectors are (K,) or, for per-realization problems,
(S, K).

Channel entries h_{l,k} of an AP l that does not serve user k are observed
by nobody. The MMSE filters below therefore only use the observed entries
and account for the rest through their variance, which enters each AP as an
extra white noise term ``sum_j p_j * unobserved[l, j]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Any, Mapping

import numpy as np

from .scenario import CSICase, CSIStructure

__all__ = [
    "PolicyStateError",
    "Strategy",
    "BeamformerPolicy",
    "effective_ap_noise",
    "centralized_mmse",
    "local_mmse",
    "local_mmse_all",
    "fit_lsfd_weights",
    "evaluate_policy",
    "default_strategy",
]


class PolicyStateError(RuntimeError):
    """Policy evaluated before its long-term parameters were fitted."""


class Strategy(str, enum.Enum):
    CENTRALIZED_MMSE = "centralized_mmse"
    LOCAL_MMSE = "local_mmse"
    LOCAL_MMSE_LSFD = "local_mmse_lsfd"
    FIXED_FULL_POWER_MMSE = "fixed_full_power_mmse"


def default_strategy(case: CSICase) -> Strategy:
    """MSE-minimizing family used by the long-term optimizer for each case."""
    return {
        CSICase.CENTRALIZED_CLUSTERED: Strategy.CENTRALIZED_MMSE,
        CSICase.DISTRIBUTED_LOCAL: Strategy.LOCAL_MMSE_LSFD,
        CSICase.SMALL_CELLS: Strategy.LOCAL_MMSE,
    }[case]


def _as_batch(H) -> tuple[np.ndarray, bool]:
    H = np.asarray(H)
    if H.ndim == 2:
        return H[None], True
    return H, False


def _check_finite(H):
    if not np.all(np.isfinite(H)):
        raise ValueError("channel realization contains non-finite entries")


def effective_ap_noise(p, unobserved) -> np.ndarray:
    """Per-AP noise level 1 + sum_j p_j * unobserved[l, j]; shape (..., L)."""
    p = np.asarray(p, dtype=float)
    return 1.0 + p @ np.asarray(unobserved, dtype=float).T


def _prepare(H, p, csi: CSIStructure, unobserved):
    Hb, squeeze = _as_batch(H)
    _check_finite(Hb)
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("powers must be finite and nonnegative")
    if unobserved is None:
        unobserved = np.zeros((csi.num_aps, csi.num_users))
    mask = csi.antenna_mask
    Hobs = Hb * mask
    noise = np.repeat(effective_ap_noise(p, unobserved), csi.antennas_per_ap, axis=-1)  # (..., M)
    if noise.ndim == 1:
        noise = noise[None]
    pb = p if p.ndim == 2 else p[None]
    return Hobs, pb, noise, squeeze


def _solve_hpd(A, b):
    # A = X P X^H + D with D >= I, so plain LU is well conditioned
    return np.linalg.solve(A, b)


def centralized_mmse(H, p, csi: CSIStructure, unobserved=None) -> np.ndarray:
    """Clustered centralized MMSE: v_k = sqrt(p_k) (H_c P H_c^H + D_c)^{-1} h_{k,c}.

    ``H_c`` holds the rows of the APs in L_k with every entry observed by
    those APs; ``D_c`` is the per-AP noise incl. unobserved interference.
    Zero outside the cluster antennas.
    """
    Hobs, pb, noise, squeeze = _prepare(H, p, csi, unobserved)
    S, M, K = Hobs.shape
    V = np.zeros((S, M, K), dtype=complex)
    sqrt_p = np.sqrt(pb)
    groups: dict[tuple[int, ...], list[int]] = {}
    for k, aps in enumerate(csi.serving_sets):
        groups.setdefault(aps, []).append(k)
    for aps, users in groups.items():
        rows = csi.cluster_antennas(users[0])
        Hc = Hobs[:, rows, :]
        A = (Hc * pb[:, None, :]) @ Hc.conj().transpose(0, 2, 1)
        idx = np.arange(len(rows))
        A[:, idx, idx] += noise[:, rows]
        rhs = Hc[:, :, users] * sqrt_p[:, None, users]
        sol = _solve_hpd(A, rhs)
        V[:, rows[:, None], np.asarray(users)[None, :]] = sol
    return V[0] if squeeze else V


def local_mmse(H, p, csi: CSIStructure, ap_index: int, unobserved=None) -> np.ndarray:
    """Combiner blocks of one AP, shape (N, K) or (S, N, K).

    Block k equals sqrt(p_k) (H_l P H_l^H + D_l)^{-1} h_{l,k} for the users
    served by AP l and is zero otherwise; H_l only contains the channels AP l
    observes.
    """
    Hobs, pb, noise, squeeze = _prepare(H, p, csi, unobserved)
    out = _local_block(Hobs, pb, noise, csi, ap_index)
    return out[0] if squeeze else out


def _local_block(Hobs, pb, noise, csi, l):
    N = csi.antennas_per_ap
    rows = np.arange(l * N, (l + 1) * N)
    Hl = Hobs[:, rows, :]
    A = (Hl * pb[:, None, :]) @ Hl.conj().transpose(0, 2, 1)
    idx = np.arange(N)
    A[:, idx, idx] += noise[:, rows]
    # unobserved columns of Hl are zero, hence so are the corresponding blocks
    return _solve_hpd(A, Hl * np.sqrt(pb)[:, None, :])


def local_mmse_all(H, p, csi: CSIStructure, unobserved=None) -> np.ndarray:
    """Stack of the local MMSE blocks of all APs, shape (M, K) or (S, M, K)."""
    Hobs, pb, noise, squeeze = _prepare(H, p, csi, unobserved)
    N = csi.antennas_per_ap
    V = np.empty(Hobs.shape, dtype=complex)
    for l in range(csi.num_aps):
        V[:, l * N:(l + 1) * N, :] = _local_block(Hobs, pb, noise, csi, l)
    return V[0] if squeeze else V


def _ldexp(x, e: int):
    return np.ldexp(x.real, e) + 1j * np.ldexp(x.imag, e)


def fit_lsfd_weights(local_moments, p, normalize: bool = True) -> np.ndarray:
    """Statistical combining weights over the AP blocks of each user.

    ``local_moments`` is a :class:`~ltwmmse.metrics.BlockMoments`. For user k
    the weights solve (sum_j p_j G_jk + diag(n_k)) w = conj(m_k), which
    maximizes the UatF SINR of the combined estimate. With ``normalize`` the
    vector has unit norm and a real positive first nonzero entry; otherwise it
    is scaled by sqrt(p_k), the MSE-minimizing scale.

    Returns an (L, K) complex array, zero outside the serving sets.
    """
    p = np.asarray(p, dtype=float)
    W = np.zeros((local_moments.num_aps, len(local_moments.aps)), dtype=complex)
    for k, aps in enumerate(local_moments.aps):
        n = local_moments.noise[k]
        A = np.einsum("j,jqr->qr", p, local_moments.gram[k]) + np.diag(n)
        support = np.flatnonzero(np.abs(np.diag(A)) > 0)
        if support.size == 0:
            continue
        # exact power-of-two rescaling: the moments of a user whose power decays
        # to zero become subnormal, and a plain solve or division would overflow
        e = int(np.frexp(np.max(np.abs(np.diag(A)[support])))[1])
        h = e // 2
        w = np.zeros(len(aps), dtype=complex)
        w[support] = np.linalg.solve(
            _ldexp(A[np.ix_(support, support)], -e), _ldexp(local_moments.mean[k][support].conj(), -h)
        )
        if normalize:
            norm = np.linalg.norm(w)
            if norm == 0 or not np.isfinite(norm):
                continue
            first = w[np.flatnonzero(np.abs(w) > 0)[0]]
            w = w / norm * (abs(first) / first)
        else:
            w = _ldexp(np.sqrt(p[k]) * w, h - e)
        W[list(aps), k] = w
    return W


@dataclass(frozen=True)
class BeamformerPolicy:
    """A beamforming function: strategy plus its long-term parameters.

    filter_power
        Power vector inside the MMSE filters. ``None`` means not fitted.
    unobserved
        (L, K) variances of the channel entries nobody observes.
    block_weights
        (L, K) complex statistical weights multiplying each AP block of v_k
        (LSFD weights or a per-user scale); ``None`` means 1 on the serving APs.
    """

    strategy: Strategy
    csi: CSIStructure
    filter_power: np.ndarray | None = None
    unobserved: np.ndarray | None = None
    block_weights: np.ndarray | None = None

    @property
    def base_is_centralized(self) -> bool:
        if self.strategy is Strategy.FIXED_FULL_POWER_MMSE:
            return self.csi.case is CSICase.CENTRALIZED_CLUSTERED
        return self.strategy is Strategy.CENTRALIZED_MMSE

    def with_weights(self, weights) -> "BeamformerPolicy":
        return replace(self, block_weights=None if weights is None else np.asarray(weights, dtype=complex))

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        w = self.block_weights
        return {
            "strategy": self.strategy.value,
            "csi": self.csi.to_dict(),
            "filter_power": arr(self.filter_power),
            "unobserved": arr(self.unobserved),
            "block_weights_re": None if w is None else arr(w.real),
            "block_weights_im": None if w is None else arr(w.imag),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BeamformerPolicy":
        def arr(x, dtype=float):
            return None if x is None else np.asarray(x, dtype=dtype)

        w = None
        if data.get("block_weights_re") is not None:
            w = arr(data["block_weights_re"]) + 1j * arr(data["block_weights_im"])
        return cls(
            strategy=Strategy(data["strategy"]),
            csi=CSIStructure.from_dict(data["csi"]),
            filter_power=arr(data.get("filter_power")),
            unobserved=arr(data.get("unobserved")),
            block_weights=w,
        )


def evaluate_policy(policy: BeamformerPolicy, H, p=None) -> np.ndarray:
    """Beamformers of ``policy`` on one realization (M, K) or a batch (S, M, K).

    ``p`` replaces the stored filter power, except for the fixed full-power
    strategy which always uses its frozen vector.
    """
    if policy.filter_power is None:
        raise PolicyStateError(f"{policy.strategy.value} policy has no fitted filter power")
    if policy.strategy is Strategy.LOCAL_MMSE_LSFD and policy.block_weights is None:
        raise PolicyStateError("LSFD policy has no fitted weights")
    power = policy.filter_power
    if p is not None and policy.strategy is not Strategy.FIXED_FULL_POWER_MMSE:
        power = p
    if policy.base_is_centralized:
        V = centralized_mmse(H, power, policy.csi, policy.unobserved)
    else:
        V = local_mmse_all(H, power, policy.csi, policy.unobserved)
    if policy.block_weights is not None:
        V = V * np.repeat(policy.block_weights, policy.csi.antennas_per_ap, axis=0)
    return V
