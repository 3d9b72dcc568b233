"""Block coordinate ascent for the long-term W-MMSE problem and its baselines.

Every algorithm alternates the same three updates on a fixed channel batch:

1. beamformers: minimize each MSE_k over the admissible family at the
   current powers,
2. weights: d_k = 1 / MSE_k,
3. powers: closed-form minimizer of sum_k omega_k d_k MSE_k over [0, P]^K.

They only differ in the beamformer family of step 1. The objective trace
records the weighted UatF sum rate after each beamformer update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .beamforming import (
    BeamformerPolicy,
    Strategy,
    centralized_mmse,
    default_strategy,
    evaluate_policy,
    fit_lsfd_weights,
    local_mmse_all,
)
from .channel import ChannelBatch
from .metrics import (
    UatFMoments,
    combine_block_moments,
    estimate_block_moments,
    moments_from_beamformers,
    mse,
    wsr_uatf,
)
from .scenario import CSICase, CSIStructure

log = logging.getLogger(__name__)

__all__ = [
    "UnsupportedCaseError",
    "OptimizerOptions",
    "OptimizationResult",
    "d_update",
    "power_update",
    "longterm_wmmse",
    "longterm_power_only",
    "longterm_lsfd",
    "shortterm_wmmse",
    "shortterm_wmmse_batch",
    "ShortTermResult",
]


class UnsupportedCaseError(ValueError):
    """Algorithm not applicable to the requested information constraint."""


@dataclass
class OptimizerOptions:
    max_iters: int = 200
    rel_tol: float = 1e-5
    initial_p: np.ndarray | None = None  # None: full power
    trace: bool = True
    # called after every d-update as callback(moments, p, d)
    callback: Callable | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")


@dataclass
class OptimizationResult:
    p_opt: np.ndarray
    policy_opt: BeamformerPolicy
    d_final: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    moments: UatFMoments | None = None

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self) -> dict:
        return {
            "p_opt": self.p_opt.tolist(),
            "d_final": self.d_final.tolist(),
            "objective_trace": [float(x) for x in self.objective_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "policy": self.policy_opt.to_dict(),
        }


def d_update(m: UatFMoments, p) -> np.ndarray:
    return 1.0 / mse(m, p)


def power_update(m: UatFMoments, d, omega, P: float) -> np.ndarray:
    """p_k = min{(omega_k d_k Re a_k / sum_j omega_j d_j B[k, j])^2, P}.

    For beamformers coming out of an MSE minimization a_k is real and
    nonnegative, so Re a_k = |a_k|.
    """
    wd = np.asarray(omega) * np.asarray(d)
    num = wd * np.maximum(m.a.real, 0.0)
    den = np.sum(m.B * wd[..., None, :], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.minimum(root**2, P)


def _check_inputs(K, omega, P):
    omega = np.ones(K) if omega is None else np.asarray(omega, dtype=float)
    if omega.shape != (K,) or np.any(omega < 0) or not np.all(np.isfinite(omega)):
        raise ValueError("omega must be a finite nonnegative vector of length K")
    if not P > 0:
        raise ValueError("power budget must be positive")
    return omega


def _initial_power(options: OptimizerOptions, K, P):
    if options.initial_p is None:
        return np.full(K, float(P))
    p = np.asarray(options.initial_p, dtype=float)
    if p.shape != (K,) or np.any(p < 0) or np.any(p > P):
        raise ValueError("initial_p must lie in [0, P]^K")
    return p.copy()


def _ascent(v_update, K, omega, P, options: OptimizerOptions) -> OptimizationResult:
    p = _initial_power(options, K, P)
    policy, m = v_update(p, None)
    f = float(wsr_uatf(m, p, omega))
    trace = [f]
    converged = False
    d = d_update(m, p)
    for _ in range(options.max_iters - 1):
        if options.callback is not None:
            options.callback(m, p, d)
        p = power_update(m, d, omega, P)
        policy, m = v_update(p, d)
        f_new = float(wsr_uatf(m, p, omega))
        trace.append(f_new)
        d = d_update(m, p)
        if f_new - f <= options.rel_tol * max(abs(f), 1e-300):
            converged = True
            break
        f = f_new
    if options.callback is not None:
        options.callback(m, p, d)
    return OptimizationResult(
        p_opt=p,
        policy_opt=policy,
        d_final=d,
        objective_trace=trace if options.trace else trace[-1:],
        iterations=len(trace),
        converged=converged,
        moments=m,
    )


def _scaled(m: UatFMoments, beta) -> UatFMoments:
    g = np.abs(beta) ** 2
    return UatFMoments(
        a=beta * m.a,
        B=m.B * g[None, :],
        c=m.c * g,
        sample_count=m.sample_count,
        self_var=None if m.self_var is None else m.self_var * g,
        ap_power=None if m.ap_power is None else m.ap_power * g[None, :],
    )


def optimal_scale(m: UatFMoments, p) -> np.ndarray:
    """Complex per-user scale minimizing MSE(beta_k v_k)."""
    p = np.asarray(p, dtype=float)
    total = np.sum(p[:, None] * m.B, axis=0) + m.c
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(total > 0, np.sqrt(p) * m.a.conj() / np.where(total > 0, total, 1.0), 0.0)


def longterm_wmmse(
    batch: ChannelBatch,
    csi: CSIStructure,
    omega=None,
    P: float = 1.0,
    options: OptimizerOptions | None = None,
    strategy: Strategy | None = None,
) -> OptimizationResult:
    """Long-term joint power control and beamforming design.

    The beamformer update is the constrained MMSE of ``csi.case``:
    clustered centralized MMSE, local MMSE (small cells), or local MMSE
    combined over the serving APs with MSE-optimal LSFD weights
    (distributed). In the last case the LSFD weights are also refitted for
    the previous combiners and the better of the two candidates is kept, so
    that the beamformer update never increases the weighted MSE.
    """
    options = options or OptimizerOptions()
    K = csi.num_users
    omega = _check_inputs(K, omega, P)
    strategy = strategy or default_strategy(csi.case)
    serving = csi.serving
    unobserved = batch.unobserved_power(serving)
    base = BeamformerPolicy(strategy=strategy, csi=csi, unobserved=unobserved)

    if strategy in (Strategy.CENTRALIZED_MMSE, Strategy.LOCAL_MMSE):

        def v_update(p, d):
            policy = replace(base, filter_power=p.copy())
            V = evaluate_policy(policy, batch.samples)
            return policy, moments_from_beamformers(batch, V, serving)

    elif strategy is Strategy.LOCAL_MMSE_LSFD:
        state = {}

        def v_update(p, d):
            combiner = replace(base, strategy=Strategy.LOCAL_MMSE, filter_power=p.copy())
            bm = estimate_block_moments(batch, evaluate_policy(combiner, batch.samples), csi)
            W = fit_lsfd_weights(bm, p, normalize=False)
            m = combine_block_moments(bm, W)
            if d is not None and "bm" in state:
                W_old = fit_lsfd_weights(state["bm"], p, normalize=False)
                m_old = combine_block_moments(state["bm"], W_old)
                cost = np.sum(omega * d * mse(m, p))
                if np.sum(omega * d * mse(m_old, p)) < cost:
                    combiner, bm, W, m = state["combiner"], state["bm"], W_old, m_old
            state.update(combiner=combiner, bm=bm)
            return replace(combiner, strategy=Strategy.LOCAL_MMSE_LSFD, block_weights=W), m

    else:
        raise ValueError(f"strategy {strategy.value} is not an MSE-minimizing family")

    return _ascent(v_update, K, omega, P, options)


def _full_power_policy(batch, csi, P):
    return BeamformerPolicy(
        strategy=Strategy.FIXED_FULL_POWER_MMSE,
        csi=csi,
        filter_power=np.full(csi.num_users, float(P)),
        unobserved=batch.unobserved_power(csi.serving),
    )


def longterm_power_only(
    batch: ChannelBatch,
    csi: CSIStructure,
    omega=None,
    P: float = 1.0,
    options: OptimizerOptions | None = None,
) -> OptimizationResult:
    """Long-term power control with beamformers frozen at their full-power MMSE form.

    Only a deterministic per-user scale of the frozen beamformer is updated
    (its MSE-optimal value), which leaves the SINR unchanged but keeps the
    W-MMSE updates consistent.
    """
    options = options or OptimizerOptions()
    K = csi.num_users
    omega = _check_inputs(K, omega, P)
    base = _full_power_policy(batch, csi, P)
    m0 = moments_from_beamformers(batch, evaluate_policy(base, batch.samples), csi.serving)
    serving = csi.serving

    def v_update(p, d):
        beta = optimal_scale(m0, p)
        return base.with_weights(serving * beta[None, :]), _scaled(m0, beta)

    return _ascent(v_update, K, omega, P, options)


def longterm_lsfd(
    batch: ChannelBatch,
    csi: CSIStructure,
    omega=None,
    P: float = 1.0,
    options: OptimizerOptions | None = None,
) -> OptimizationResult:
    """Long-term power control and LSFD design over frozen full-power combiners."""
    options = options or OptimizerOptions()
    K = csi.num_users
    omega = _check_inputs(K, omega, P)
    base = _full_power_policy(batch, csi, P)
    bm = estimate_block_moments(batch, evaluate_policy(base, batch.samples), csi)

    def v_update(p, d):
        W = fit_lsfd_weights(bm, p, normalize=False)
        return base.with_weights(W), combine_block_moments(bm, W)

    return _ascent(v_update, K, omega, P, options)


@dataclass
class ShortTermResult:
    p: np.ndarray  # (S, K)
    V: np.ndarray  # (S, M, K)
    trace: np.ndarray  # (iterations, S)
    iterations: int
    converged: bool


def _take(m: UatFMoments, idx) -> UatFMoments:
    return UatFMoments(
        a=m.a[idx], B=m.B[idx], c=m.c[idx], sample_count=1,
        self_var=m.self_var[idx], ap_power=m.ap_power[idx],
    )


def shortterm_wmmse_batch(
    batch: ChannelBatch,
    csi: CSIStructure,
    omega=None,
    P: float = 1.0,
    options: OptimizerOptions | None = None,
) -> ShortTermResult:
    """Classical WMMSE solved independently for every realization of ``batch``.

    Each realization is treated as a one-sample batch, so the same update
    rules apply with instantaneous moments. Iterates until every realization
    has converged.
    """
    if csi.case is CSICase.DISTRIBUTED_LOCAL:
        raise UnsupportedCaseError("short-term WMMSE is not applicable to distributed beamforming")
    options = options or OptimizerOptions()
    K = csi.num_users
    S = batch.sample_count
    omega = _check_inputs(K, omega, P)
    serving = csi.serving
    unobserved = batch.unobserved_power(serving)
    mmse = centralized_mmse if csi.case is CSICase.CENTRALIZED_CLUSTERED else local_mmse_all

    def v_update(samples, p):
        sub = replace(batch, samples=samples)
        V = mmse(samples, p, csi, unobserved)
        return V, moments_from_beamformers(sub, V, serving, per_sample=True)

    p = np.tile(_initial_power(options, K, P), (S, 1))
    V, m = v_update(batch.samples, p)
    f = wsr_uatf(m, p, omega)
    trace = [f.copy()]
    d = d_update(m, p)
    # only realizations that have not converged yet are updated
    active = np.arange(S)
    for _ in range(options.max_iters - 1):
        p_new = power_update(m, d[active], omega, P)
        V_new, m = v_update(batch.samples[active], p_new)
        f_new = wsr_uatf(m, p_new, omega)
        p[active], V[active] = p_new, V_new
        keep = f_new - f[active] > options.rel_tol * np.maximum(np.abs(f[active]), 1e-300)
        f[active] = f_new
        d[active] = d_update(m, p_new)
        trace.append(f.copy())
        active = active[keep]
        if active.size == 0:
            break
        m = _take(m, keep)

    return ShortTermResult(p=p, V=V, trace=np.array(trace), iterations=len(trace), converged=active.size == 0)


def shortterm_wmmse(H_sample, csi: CSIStructure, omega=None, P: float = 1.0, options=None, beta=None):
    """Short-term WMMSE for one realization; returns (p, V, objective trace)."""
    H = np.asarray(H_sample, dtype=complex)
    batch = ChannelBatch.from_samples(
        H[None], beta=np.zeros((csi.num_aps, csi.num_users)) if beta is None else beta,
        antennas_per_ap=csi.antennas_per_ap,
    )
    res = shortterm_wmmse_batch(batch, csi, omega, P, options)
    return res.p[0], res.V[0], [float(x) for x in res.trace[:, 0]]
