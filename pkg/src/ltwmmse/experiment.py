"""Monte Carlo experiment: drops x algorithms x information constraints.

Every drop is processed independently from ``(master seed, drop index)``;
results are merged in drop order, so the output does not depend on the
number of worker processes.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .beamforming import evaluate_policy
from .channel import sample_channels, split_batch
from .metrics import ergodic_rate_stats, instantaneous_rates, moments_from_beamformers, to_bits, uatf_rate
from .optimizer import (
    OptimizerOptions,
    longterm_lsfd,
    longterm_power_only,
    longterm_wmmse,
    shortterm_wmmse_batch,
)
from .scenario import (
    STREAM_CHANNEL,
    ConfigError,
    CSICase,
    ScenarioConfig,
    assign_clusters,
    build_csi_structure,
    compute_large_scale,
    generate_drop,
)

log = logging.getLogger(__name__)

__all__ = [
    "Algorithm",
    "ExperimentConfig",
    "ExperimentResult",
    "load_config",
    "run_drop",
    "run_experiment",
    "emit_cdf",
    "format_cdf",
    "medians",
]


class Algorithm(str, enum.Enum):
    LONG_TERM_WMMSE = "longterm_wmmse"
    POWER_ONLY = "power_only"
    LSFD = "lsfd"
    SHORT_TERM_WMMSE = "shortterm_wmmse"

    @classmethod
    def parse(cls, value: "str | Algorithm") -> "Algorithm":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "longtermwmmse": cls.LONG_TERM_WMMSE,
            "longterm_wmmse": cls.LONG_TERM_WMMSE,
            "long_term_wmmse": cls.LONG_TERM_WMMSE,
            "poweronly": cls.POWER_ONLY,
            "power_only": cls.POWER_ONLY,
            "lsfd": cls.LSFD,
            "shorttermwmmse": cls.SHORT_TERM_WMMSE,
            "shortterm_wmmse": cls.SHORT_TERM_WMMSE,
            "short_term_wmmse": cls.SHORT_TERM_WMMSE,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigError(f"unknown algorithm {value!r}") from None


def supported(algorithm: Algorithm, case: CSICase) -> bool:
    return not (algorithm is Algorithm.SHORT_TERM_WMMSE and case is CSICase.DISTRIBUTED_LOCAL)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    num_drops: int = 300
    samples_per_drop: int = 1000
    eval_fraction: float = 0.5
    algorithms: tuple[Algorithm, ...] = tuple(Algorithm)
    cases: tuple[CSICase, ...] = tuple(CSICase)
    weights: tuple[float, ...] | None = None  # None: unit weights
    max_iters: int = 200
    rel_tol: float = 1e-5
    output_path: str = "results"
    threads: int = 1
    store_policies: bool = False

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(Algorithm.parse(a) for a in self.algorithms))
        object.__setattr__(self, "cases", tuple(CSICase.parse(c) for c in self.cases))
        if self.num_drops < 1:
            raise ConfigError("num_drops must be >= 1")
        if self.samples_per_drop < 2:
            raise ConfigError("samples_per_drop must be >= 2")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        n_fit = int(np.floor(self.samples_per_drop * (1.0 - self.eval_fraction)))
        if n_fit < 1 or n_fit >= self.samples_per_drop:
            raise ConfigError("eval_fraction leaves an empty fit or evaluation batch")
        if not self.algorithms or not self.cases:
            raise ConfigError("at least one algorithm and one case are required")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != self.scenario.num_users or min(w) < 0:
                raise ConfigError("weights must be K nonnegative numbers")
            object.__setattr__(self, "weights", w)
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def plan(self, warn: bool = True) -> list[tuple[Algorithm, CSICase]]:
        """(algorithm, case) pairs to run; unsupported pairs are dropped with a warning."""
        pairs = []
        for case in self.cases:
            for alg in self.algorithms:
                if supported(alg, case):
                    pairs.append((alg, case))
                elif warn:
                    log.warning("skipping %s x %s: not applicable", alg.value, case.value)
        return pairs

    @property
    def omega(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.scenario.num_users)
        return np.asarray(self.weights, dtype=float)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scenario"] = self.scenario.to_dict()
        d["algorithms"] = [a.value for a in self.algorithms]
        d["cases"] = [c.value for c in self.cases]
        d["weights"] = None if self.weights is None else list(self.weights)
        # execution details do not belong to the result
        del d["threads"], d["output_path"]
        return d

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        scenario = ScenarioConfig.from_mapping(data.pop("scenario", {}) or {})
        known = {f.name for f in fields(cls)} - {"scenario"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        for key in ("algorithms", "cases"):
            if isinstance(data.get(key), str):
                data[key] = [s for s in data[key].split(",") if s.strip()]
            if key in data:
                data[key] = tuple(data[key])
        if data.get("weights") in ("unit", "Unit"):
            data["weights"] = None
        return cls(scenario=scenario, **data)


def load_config(path) -> ExperimentConfig:
    """Load a YAML or JSON configuration file."""
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            import yaml

            data = yaml.safe_load(text)
    except Exception as exc:  # noqa: BLE001 - any parse failure is a config error
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path} must contain a mapping")
    try:
        return ExperimentConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _channel_seed(seed: int, drop_index: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(drop_index), STREAM_CHANNEL))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_LONG_TERM = {
    Algorithm.LONG_TERM_WMMSE: longterm_wmmse,
    Algorithm.POWER_ONLY: longterm_power_only,
    Algorithm.LSFD: longterm_lsfd,
}


def run_drop(config: ExperimentConfig, drop_index: int) -> list[dict]:
    """All (algorithm, case) rows of one drop. Wall-clock time is in ``runtime_s``."""
    sc = config.scenario
    geometry = generate_drop(sc, drop_index)
    beta = compute_large_scale(geometry, sc)
    batch = sample_channels(beta, config.samples_per_drop, _channel_seed(sc.seed, drop_index), sc.antennas_per_ap)
    fit, ev = split_batch(batch, 1.0 - config.eval_fraction)
    omega = config.omega
    P = sc.power_budget
    options = OptimizerOptions(max_iters=config.max_iters, rel_tol=config.rel_tol)
    plan = config.plan(warn=False)
    rows = []
    csis = {}
    for alg, case in plan:
        if case not in csis:
            Q = 1 if case is CSICase.SMALL_CELLS else sc.cluster_size
            csis[case] = build_csi_structure(case, assign_clusters(beta, Q), sc.num_aps, sc.antennas_per_ap)
        csi = csis[case]
        t0 = time.perf_counter()
        row: dict[str, Any] = {"drop": int(drop_index), "algorithm": alg.value, "case": case.value}
        if alg is Algorithm.SHORT_TERM_WMMSE:
            res = shortterm_wmmse_batch(ev, csi, omega, P, options)
            rates = instantaneous_rates(ev.samples, res.V, res.p).mean(axis=0)
            row.update(
                ergodic_sum_rate_bits=float(to_bits(rates.sum())),
                ergodic_wsr_bits=float(to_bits(omega @ rates)),
                uatf_sum_rate_bits=None,
                iterations=int(res.iterations),
                converged=bool(res.converged),
                active_users=float(np.mean(np.sum(res.p > 0, axis=1))),
            )
        else:
            res = _LONG_TERM[alg](fit, csi, omega, P, options)
            V = evaluate_policy(res.policy_opt, ev.samples)
            rates, _ = ergodic_rate_stats(ev, V, res.p_opt)
            uatf = uatf_rate(moments_from_beamformers(ev, V, csi.serving), res.p_opt)
            row.update(
                ergodic_sum_rate_bits=float(to_bits(rates.sum())),
                ergodic_wsr_bits=float(to_bits(omega @ rates)),
                uatf_sum_rate_bits=float(to_bits(uatf.sum())),
                iterations=int(res.iterations),
                converged=bool(res.converged),
                active_users=float(np.sum(res.p_opt > 0)),
                p_opt=res.p_opt.tolist(),
                objective_trace=[float(x) for x in res.objective_trace],
            )
            if config.store_policies:
                row["policy"] = res.policy_opt.to_dict()
        row["runtime_s"] = time.perf_counter() - t0
        rows.append(row)
    return rows


def _run_drop_single_threaded(args):
    config, drop_index = args
    with threadpool_limits(limits=1):
        return run_drop(config, drop_index)


@dataclass
class ExperimentResult:
    rows: list[dict]
    metadata: dict

    def results_dict(self) -> dict:
        """Deterministic content: everything except wall-clock timings."""
        rows = [{k: v for k, v in r.items() if k != "runtime_s"} for r in self.rows]
        return {"metadata": self.metadata, "rows": rows}

    def to_json(self) -> str:
        return json.dumps(self.results_dict(), indent=1, allow_nan=False) + "\n"

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["drop", "algorithm", "case", "runtime_s", "iterations"])
        for r in self.rows:
            w.writerow([r["drop"], r["algorithm"], r["case"], f"{r['runtime_s']:.6f}", r["iterations"]])
        return buf.getvalue()

    def save(self, output_dir) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(self.to_json())
        for metric in ("ergodic", "uatf"):
            (out / f"cdf_{metric}.csv").write_text(format_cdf(emit_cdf(self, metric, "both")))
        (out / "timings.csv").write_text(self.timings_csv())
        return out / "results.json"

    @classmethod
    def load(cls, path) -> "ExperimentResult":
        data = json.loads(Path(path).read_text())
        return cls(rows=data["rows"], metadata=data["metadata"])


def run_experiment(config: ExperimentConfig, threads: int | None = None, progress: bool = True) -> ExperimentResult:
    threads = config.threads if threads is None else threads
    plan = config.plan()
    drops = range(config.num_drops)
    rows: list[dict] = []
    jobs = ((config, d) for d in drops)
    if threads <= 1:
        results: Iterable = map(_run_drop_single_threaded, jobs)
        executor = None
    else:
        executor = ProcessPoolExecutor(max_workers=threads)
        results = executor.map(_run_drop_single_threaded, jobs)
    try:
        for d, drop_rows in zip(drops, results):
            rows.extend(drop_rows)
            if progress:
                log.info("drop %d/%d done", d + 1, config.num_drops)
    finally:
        if executor is not None:
            executor.shutdown()
    metadata = {
        "code_version": __version__,
        "seed": config.scenario.seed,
        "config": config.to_dict(),
        "pairs": [[a.value, c.value] for a, c in plan],
        "rate_unit": "bit/s/Hz",
        "fit_samples": int(np.floor(config.samples_per_drop * (1.0 - config.eval_fraction))),
    }
    return ExperimentResult(rows=rows, metadata=metadata)


_METRICS = {"ergodic": "ergodic_sum_rate_bits", "uatf": "uatf_sum_rate_bits", "ergodic_wsr": "ergodic_wsr_bits"}


def _group_key(row, group_by):
    if group_by == "algorithm":
        return row["algorithm"]
    if group_by == "case":
        return row["case"]
    if group_by == "both":
        return f"{row['algorithm']}/{row['case']}"
    raise ValueError(f"unknown group_by {group_by!r}; use algorithm, case or both")


def emit_cdf(result: "ExperimentResult | Sequence[dict]", metric: str = "ergodic", group_by: str = "both"):
    """Empirical CDF rows (group, value_bits, cdf_level) with levels i/n."""
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}; known: {sorted(_METRICS)}")
    rows = result.rows if isinstance(result, ExperimentResult) else list(result)
    if not rows:
        raise ValueError("empty result")
    key = _METRICS[metric]
    groups: dict[str, list[float]] = {}
    for r in rows:
        if r.get(key) is None:
            continue
        groups.setdefault(_group_key(r, group_by), []).append(float(r[key]))
    table = []
    for g in groups:
        vals = sorted(groups[g])
        n = len(vals)
        table.extend((g, v, (i + 1) / n) for i, v in enumerate(vals))
    return table


def format_cdf(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "value_bits", "cdf_level"])
    for g, v, lvl in table:
        w.writerow([g, repr(float(v)), repr(float(lvl))])
    return buf.getvalue()


def medians(result: "ExperimentResult | Sequence[dict]", metric: str = "ergodic", group_by: str = "both") -> dict:
    key = _METRICS[metric]
    rows = result.rows if isinstance(result, ExperimentResult) else list(result)
    groups: dict[str, list[float]] = {}
    for r in rows:
        if r.get(key) is not None:
            groups.setdefault(_group_key(r, group_by), []).append(float(r[key]))
    return {g: float(np.median(v)) for g, v in groups.items()}
