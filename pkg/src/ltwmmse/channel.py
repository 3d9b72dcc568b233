"""Seeded batches of uncorrelated Rayleigh fading realizations."""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["ChannelBatch", "sample_channels", "split_batch", "save_batch", "load_batch"]

_MAGIC = b"LTWCHB01"


@dataclass(frozen=True)
class ChannelBatch:
    """``samples[s]`` is the M x K matrix H = [h_1, ..., h_K] of realization s.

    ``beta`` (L x K) is kept alongside the realizations because the moment
    estimators replace channel entries that nobody observes by their exact
    second-order statistics.
    """

    samples: np.ndarray
    beta: np.ndarray
    antennas_per_ap: int = 1
    seed: int = 0

    def __post_init__(self):
        S, M, K = self.samples.shape
        L = self.beta.shape[0]
        if self.beta.shape != (L, K) or L * self.antennas_per_ap != M:
            raise ValueError(
                f"samples {self.samples.shape} inconsistent with beta {self.beta.shape} "
                f"and N={self.antennas_per_ap}"
            )

    @classmethod
    def from_samples(cls, samples, beta=None, antennas_per_ap: int = 1, seed: int = 0) -> "ChannelBatch":
        samples = np.asarray(samples, dtype=complex)
        if samples.ndim == 2:
            samples = samples[None]
        S, M, K = samples.shape
        if beta is None:
            beta = np.ones((M // antennas_per_ap, K))
        return cls(samples=samples, beta=np.asarray(beta, dtype=float), antennas_per_ap=antennas_per_ap, seed=seed)

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]

    @property
    def num_users(self) -> int:
        return self.samples.shape[2]

    @property
    def num_aps(self) -> int:
        return self.beta.shape[0]

    def __len__(self) -> int:
        return self.sample_count

    def observed(self, serving: np.ndarray) -> np.ndarray:
        """Realizations with the never-observed entries (AP l not serving k) zeroed."""
        mask = np.repeat(np.asarray(serving, dtype=bool), self.antennas_per_ap, axis=0)
        return self.samples * mask

    def unobserved_power(self, serving: np.ndarray) -> np.ndarray:
        """(L, K) variance of the entries of h_{l,k} nobody observes, zero elsewhere."""
        return np.where(np.asarray(serving, dtype=bool), 0.0, self.beta)


def _draw(beta_sqrt: np.ndarray, seed: int, start: int, stop: int) -> np.ndarray:
    M, K = beta_sqrt.shape
    out = np.empty((stop - start, M, K), dtype=complex)
    for i, s in enumerate(range(start, stop)):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(s,)))
        z = rng.standard_normal((M, K, 2))
        out[i] = beta_sqrt * (z[..., 0] + 1j * z[..., 1]) / math.sqrt(2.0)
    return out


def sample_channels(
    beta: np.ndarray,
    sample_count: int,
    seed: int,
    antennas_per_ap: int = 1,
    workers: int = 1,
) -> ChannelBatch:
    """Draw ``sample_count`` i.i.d. realizations, entry (l, n, k) ~ CN(0, beta[l, k]).

    Every realization has its own stream derived from ``(seed, sample_index)``,
    so the batch does not depend on ``workers``.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    beta = np.asarray(beta, dtype=float)
    beta_sqrt = np.repeat(np.sqrt(beta), antennas_per_ap, axis=0)
    if workers <= 1:
        samples = _draw(beta_sqrt, seed, 0, sample_count)
    else:
        bounds = np.linspace(0, sample_count, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(lambda ab: _draw(beta_sqrt, seed, *ab), zip(bounds[:-1], bounds[1:]))
            samples = np.concatenate(list(parts), axis=0)
    return ChannelBatch(samples=samples, beta=beta, antennas_per_ap=antennas_per_ap, seed=int(seed))


def split_batch(batch: ChannelBatch, fraction: float) -> tuple[ChannelBatch, ChannelBatch]:
    """Order-preserving split; the first part holds ``floor(S * fraction)`` samples."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = math.floor(batch.sample_count * fraction)
    if n == 0 or n == batch.sample_count:
        raise ValueError(f"fraction {fraction} leaves an empty part of a {batch.sample_count}-sample batch")

    def part(x):
        return ChannelBatch(samples=x, beta=batch.beta, antennas_per_ap=batch.antennas_per_ap, seed=batch.seed)

    return part(batch.samples[:n]), part(batch.samples[n:])


def save_batch(path, batch: ChannelBatch) -> None:
    """Binary layout (little endian): magic, uint64 S M K L N seed, beta (L*K doubles),
    samples as interleaved real/imag doubles in C order (S, M, K)."""
    S, M, K = batch.samples.shape
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<6Q", S, M, K, batch.num_aps, batch.antennas_per_ap, batch.seed))
        fh.write(np.ascontiguousarray(batch.beta, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.samples, dtype="<c16").tobytes())


def load_batch(path) -> ChannelBatch:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a channel batch file")
        S, M, K, L, N, seed = struct.unpack("<6Q", fh.read(48))
        beta = np.frombuffer(fh.read(8 * L * K), dtype="<f8").reshape(L, K).copy()
        samples = np.frombuffer(fh.read(16 * S * M * K), dtype="<c16").reshape(S, M, K).copy()
    return ChannelBatch(samples=samples, beta=beta, antennas_per_ap=int(N), seed=int(seed))
