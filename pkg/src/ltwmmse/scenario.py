"""Network drops, large-scale fading and user-centric clustering.

All randomness is derived from ``numpy.random.SeedSequence`` with a spawn key
``(drop_index, stream)`` so that every quantity is a pure function of the
master seed and the drop index.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "PathlossModel",
    "PATHLOSS_MODELS",
    "ScenarioConfig",
    "NetworkGeometry",
    "CSICase",
    "CSIStructure",
    "generate_drop",
    "ap_grid",
    "noise_power_dbm",
    "pathloss_db",
    "compute_large_scale",
    "assign_clusters",
    "build_csi_structure",
    "drop_rng",
]

# spawn-key streams; changing these values changes every generated drop
STREAM_USERS = 0
STREAM_SHADOWING = 1
STREAM_CHANNEL = 2
STREAM_APS = 3


class ConfigError(ValueError):
    """Invalid scenario or experiment configuration."""


def drop_rng(seed: int, drop_index: int, stream: int) -> np.random.Generator:
    """Independent generator for one (drop, stream) pair of a master seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(drop_index), int(stream)))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class PathlossModel:
    """PL(d) [dB] = intercept_db - slope_db_per_decade * log10(d / 1 m) + shadowing."""

    intercept_db: float = -30.5
    slope_db_per_decade: float = 36.7
    shadowing_std_db: float = 4.0
    min_distance_m: float = 1.0

    def __post_init__(self):
        if self.min_distance_m <= 0:
            raise ConfigError("min_distance_m must be positive")
        if self.shadowing_std_db < 0:
            raise ConfigError("shadowing_std_db must be nonnegative")


PATHLOSS_MODELS: dict[str, PathlossModel] = {
    "3gpp_urban": PathlossModel(),
    "3gpp_urban_no_shadowing": PathlossModel(shadowing_std_db=0.0),
}


class CSICase(str, enum.Enum):
    CENTRALIZED_CLUSTERED = "centralized"
    DISTRIBUTED_LOCAL = "distributed"
    SMALL_CELLS = "small_cells"

    @classmethod
    def parse(cls, value: "str | CSICase") -> "CSICase":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "centralized": cls.CENTRALIZED_CLUSTERED,
            "centralizedclustered": cls.CENTRALIZED_CLUSTERED,
            "centralized_clustered": cls.CENTRALIZED_CLUSTERED,
            "i": cls.CENTRALIZED_CLUSTERED,
            "distributed": cls.DISTRIBUTED_LOCAL,
            "distributedlocal": cls.DISTRIBUTED_LOCAL,
            "distributed_local": cls.DISTRIBUTED_LOCAL,
            "ii": cls.DISTRIBUTED_LOCAL,
            "small_cells": cls.SMALL_CELLS,
            "smallcells": cls.SMALL_CELLS,
            "iii": cls.SMALL_CELLS,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigError(f"unknown CSI case {value!r}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    area_side_m: float = 500.0
    num_aps: int = 16
    antennas_per_ap: int = 4
    num_users: int = 64
    cluster_size: int = 4
    carrier_hz: float = 2e9
    bandwidth_hz: float = 20e6
    tx_power_budget_dbm: float = 20.0
    noise_figure_db: float = 7.0
    pathloss: PathlossModel = field(default_factory=PathlossModel)
    ap_placement: str = "grid"
    wrap_around: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("num_aps", "antennas_per_ap", "num_users", "cluster_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.cluster_size > self.num_aps:
            raise ConfigError("cluster_size must not exceed num_aps")
        if not self.area_side_m > 0:
            raise ConfigError("area_side_m must be positive")
        if self.bandwidth_hz <= 0 or self.carrier_hz <= 0:
            raise ConfigError("bandwidth_hz and carrier_hz must be positive")
        if self.ap_placement not in ("grid", "random"):
            raise ConfigError(f"unknown ap_placement {self.ap_placement!r}")
        if self.ap_placement == "grid" and math.isqrt(self.num_aps) ** 2 != self.num_aps:
            raise ConfigError(f"grid placement needs a square number of APs, got {self.num_aps}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def total_antennas(self) -> int:
        return self.num_aps * self.antennas_per_ap

    @property
    def power_budget(self) -> float:
        """Per-user budget P in mW; consistent with the noise-normalized gains."""
        return 10.0 ** (self.tx_power_budget_dbm / 10.0)

    def with_overrides(self, **kwargs) -> "ScenarioConfig":
        return replace(self, **kwargs)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        pl = data.pop("pathloss_model", None)
        pl_overrides = {
            k: data.pop(k) for k in list(data) if k in {f.name for f in fields(PathlossModel)}
        }
        if "pathloss" in data:
            pl = data.pop("pathloss")
        if isinstance(pl, str):
            if pl not in PATHLOSS_MODELS:
                raise ConfigError(f"unknown pathloss_model {pl!r}; known: {sorted(PATHLOSS_MODELS)}")
            base = PATHLOSS_MODELS[pl]
        elif isinstance(pl, Mapping):
            base = PathlossModel(**pl)
        elif pl is None:
            base = PathlossModel()
        else:
            raise ConfigError("pathloss_model must be a name or a mapping")
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(pathloss=replace(base, **pl_overrides), **data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NetworkGeometry:
    ap_positions: np.ndarray  # (L, 2) meters
    user_positions: np.ndarray  # (K, 2) meters
    drop_index: int = 0

    @property
    def num_aps(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_positions.shape[0]


def ap_grid(num_aps: int, side: float) -> np.ndarray:
    """Regular sqrt(L) x sqrt(L) grid, offset by half the spacing from the border."""
    n = math.isqrt(num_aps)
    if n * n != num_aps:
        raise ConfigError(f"grid placement needs a square number of APs, got {num_aps}")
    spacing = side / n
    ticks = spacing / 2 + spacing * np.arange(n)
    xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def generate_drop(config: ScenarioConfig, drop_index: int) -> NetworkGeometry:
    if config.ap_placement == "grid":
        aps = ap_grid(config.num_aps, config.area_side_m)
    else:
        # AP locations are part of the deployment, not of the drop
        aps = drop_rng(config.seed, 0, STREAM_APS).uniform(
            0.0, config.area_side_m, size=(config.num_aps, 2)
        )
    rng = drop_rng(config.seed, drop_index, STREAM_USERS)
    users = rng.uniform(0.0, config.area_side_m, size=(config.num_users, 2))
    return NetworkGeometry(ap_positions=aps, user_positions=users, drop_index=int(drop_index))


def noise_power_dbm(bandwidth_hz: float, noise_figure_db: float) -> float:
    return -174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db


def pathloss_db(distance_m, model: PathlossModel):
    """Deterministic part of the channel gain in dB (negative numbers)."""
    d = np.maximum(np.asarray(distance_m, dtype=float), model.min_distance_m)
    return model.intercept_db - model.slope_db_per_decade * np.log10(d)


def _distances(geometry: NetworkGeometry, side: float, wrap_around: bool) -> np.ndarray:
    diff = np.abs(geometry.ap_positions[:, None, :] - geometry.user_positions[None, :, :])
    if wrap_around:
        diff = np.minimum(diff, side - diff)
    return np.hypot(diff[..., 0], diff[..., 1])


def compute_large_scale(geometry: NetworkGeometry, config: ScenarioConfig) -> np.ndarray:
    """Noise-normalized average channel gains ``beta`` of shape (L, K)."""
    if geometry.num_aps != config.num_aps or geometry.num_users != config.num_users:
        raise ConfigError("geometry does not match the scenario configuration")
    d = _distances(geometry, config.area_side_m, config.wrap_around)
    gain_db = pathloss_db(d, config.pathloss)
    if config.pathloss.shadowing_std_db > 0:
        rng = drop_rng(config.seed, geometry.drop_index, STREAM_SHADOWING)
        gain_db = gain_db + config.pathloss.shadowing_std_db * rng.standard_normal(d.shape)
    noise = noise_power_dbm(config.bandwidth_hz, config.noise_figure_db)
    return 10.0 ** ((gain_db - noise) / 10.0)


def assign_clusters(beta: np.ndarray, cluster_size: int) -> tuple[tuple[int, ...], ...]:
    """Serving set of every user: its ``cluster_size`` strongest APs (ties -> lower index)."""
    beta = np.asarray(beta)
    L = beta.shape[0]
    if not 1 <= cluster_size <= L:
        raise ConfigError(f"cluster size must lie in [1, {L}]")
    order = np.argsort(-beta, axis=0, kind="stable")
    return tuple(tuple(sorted(int(l) for l in order[:cluster_size, k])) for k in range(beta.shape[1]))


@dataclass(frozen=True)
class CSIStructure:
    """Serving clusters plus which channels are observed where.

    AP ``l`` observes the channel ``h_{l,k}`` iff it serves user ``k``. In the
    centralized case the APs of a cluster pool their observations; in the
    distributed and small-cell cases each AP block of a beamformer may depend
    on the observations of that AP only. Channels ``h_{l,k}`` with ``l`` not
    serving ``k`` are observed by nobody.
    """

    case: CSICase
    serving_sets: tuple[tuple[int, ...], ...]
    num_aps: int
    antennas_per_ap: int

    @property
    def num_users(self) -> int:
        return len(self.serving_sets)

    @property
    def total_antennas(self) -> int:
        return self.num_aps * self.antennas_per_ap

    @property
    def serving(self) -> np.ndarray:
        """(L, K) boolean mask, ``serving[l, k]`` iff ``l`` in L_k."""
        mask = np.zeros((self.num_aps, self.num_users), dtype=bool)
        for k, aps in enumerate(self.serving_sets):
            mask[list(aps), k] = True
        return mask

    @property
    def knowledge_mask(self) -> tuple[frozenset, ...]:
        return tuple(
            frozenset(k for k, aps in enumerate(self.serving_sets) if l in aps)
            for l in range(self.num_aps)
        )

    @property
    def antenna_mask(self) -> np.ndarray:
        """(M, K) boolean mask of the admissible nonzero beamformer entries."""
        return np.repeat(self.serving, self.antennas_per_ap, axis=0)

    def cluster_antennas(self, k: int) -> np.ndarray:
        N = self.antennas_per_ap
        return np.concatenate([np.arange(l * N, (l + 1) * N) for l in self.serving_sets[k]])

    def to_dict(self) -> dict:
        return {
            "case": self.case.value,
            "serving_sets": [list(s) for s in self.serving_sets],
            "num_aps": self.num_aps,
            "antennas_per_ap": self.antennas_per_ap,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CSIStructure":
        return build_csi_structure(
            data["case"],
            [tuple(s) for s in data["serving_sets"]],
            num_aps=data["num_aps"],
            antennas_per_ap=data["antennas_per_ap"],
        )


def build_csi_structure(
    case: "CSICase | str",
    serving_sets: Sequence[Sequence[int]],
    num_aps: int,
    antennas_per_ap: int = 1,
) -> CSIStructure:
    case = CSICase.parse(case)
    sets = tuple(tuple(sorted(int(l) for l in s)) for s in serving_sets)
    for k, s in enumerate(sets):
        if not s:
            raise ConfigError(f"user {k} has an empty serving set")
        if len(set(s)) != len(s) or s[0] < 0 or s[-1] >= num_aps:
            raise ConfigError(f"invalid serving set for user {k}: {s}")
        if case is CSICase.SMALL_CELLS and len(s) != 1:
            raise ConfigError("small cells require exactly one serving AP per user")
    return CSIStructure(case=case, serving_sets=sets, num_aps=int(num_aps), antennas_per_ap=int(antennas_per_ap))
