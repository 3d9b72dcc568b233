"""Command line entry point: ``ltwmmse run`` and ``ltwmmse cdf``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .experiment import ExperimentConfig, ExperimentResult, emit_cdf, format_cdf, load_config, medians
from .scenario import ConfigError

log = logging.getLogger("ltwmmse")


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltwmmse", description="Long-term WMMSE power control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo experiment")
    run.add_argument("--config", help="YAML or JSON experiment file")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--drops", type=int, help="number of network drops")
    run.add_argument("--samples", type=int, help="channel samples per drop")
    run.add_argument("--algorithms", type=_csv_list, help="comma separated, e.g. longterm_wmmse,lsfd")
    run.add_argument("--cases", type=_csv_list, help="comma separated, e.g. centralized,small_cells")
    run.add_argument("--output", help="output directory")
    run.add_argument("--threads", type=int, help="worker processes over drops")
    run.add_argument("--quiet", action="store_true")

    cdf = sub.add_parser("cdf", help="print an empirical CDF table from a results file")
    cdf.add_argument("results")
    cdf.add_argument("--metric", default="ergodic", help="ergodic, uatf or ergodic_wsr")
    cdf.add_argument("--group-by", default="both", help="algorithm, case or both")
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["scenario"] = dataclasses.replace(config.scenario, seed=args.seed)
    for name, key in (("drops", "num_drops"), ("samples", "samples_per_drop"), ("algorithms", "algorithms"),
                      ("cases", "cases"), ("output", "output_path"), ("threads", "threads")):
        value = getattr(args, name)
        if value is not None:
            overrides[key] = tuple(value) if isinstance(value, list) else value
    return dataclasses.replace(config, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            config = resolve_config(args)
            result = run_and_save(config)
            for group, value in sorted(medians(result).items()):
                log.info("median ergodic sum-rate %-40s %.3f bit/s/Hz", group, value)
            return 0
        result = ExperimentResult.load(args.results)
        sys.stdout.write(format_cdf(emit_cdf(result, args.metric, args.group_by)))
        return 0
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run_and_save(config: ExperimentConfig) -> ExperimentResult:
    from .experiment import run_experiment

    log.info("running %d drops, %d samples each", config.num_drops, config.samples_per_drop)
    result = run_experiment(config)
    path = result.save(config.output_path)
    log.info("results written to %s", path)
    return result
