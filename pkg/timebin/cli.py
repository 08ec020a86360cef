"""Command-line surface: simulate, sync, analyze, sweep, pipeline and report.

Scenario files describe the source, link, clock and session; every command
writes into a fresh run directory (or extends one) together with a manifest
that records the configuration snapshot, seed and artifact digests.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from timebin import __version__
from timebin.core.errors import ConfigError, TimebinError
from timebin.core.formatting import format_ps, format_rate
from timebin.importers.scenario import format_validation_error, load_scenario
from timebin.schemas import ScenarioConfig
from timebin.services import DEFAULT_NOISE_LEVELS, PipelineService

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "TIMEBIN_LOG_LEVEL"
LOG_FORMAT = "[%(name)s] %(levelname)s %(message)s"
USAGE_EXIT = 1
IO_EXIT = 2


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the configuration status."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.replace(";", ",").split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from exc


def _common_flags() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Override the scenario seed.")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="Root directory for run directories (default: ./runs).")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Worker threads for simulation and analysis (default: 1).")
    common.add_argument(
        "--format",
        dest="tag_format",
        choices=("binary", "csv"),
        default=argparse.SUPPRESS,
        help="Tag file format written by simulate (default: binary).",
    )
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="-v for INFO, -vv for DEBUG.")
    return common


def _analysis_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("analysis overrides")
    group.add_argument("--d-list", help="Comma-separated dimensions, e.g. 4,6,12,18,36.")
    group.add_argument("--tau-mzi", type=int, help="Interferometer imbalance in ps.")
    group.add_argument("--block-len", type=float, help="Analysis block length in seconds.")
    group.add_argument("--grid-phase", help="Frame grid origin in ps, or 'auto'.")
    group.add_argument("--weighting", choices=("uniform", "coincidences"), help="Subspace averaging weight.")


def _sync_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("sync overrides")
    group.add_argument("--sync-block-len", type=float, help="Drift-tracking block length in seconds.")
    group.add_argument("--coarse-bin", type=int, help="Coarse histogram bin width in ps.")
    group.add_argument("--coarse-window", type=int, help="Coarse search half-width in ps.")
    group.add_argument("--fine-bin", type=int, help="Fine histogram bin width in ps.")
    group.add_argument("--fine-window", type=int, help="Fine search half-width in ps.")
    group.add_argument("--min-significance", type=float, help="Peak significance needed to lock a block.")


def build_parser() -> CliParser:
    common = _common_flags()
    # The top level gets its own flag actions: parents share Action objects, and
    # set_defaults below must not leak into the subcommands.
    parser = CliParser(
        prog="franson",
        description="Simulate and post-process high-dimensional energy-time entanglement time tags.",
        parents=[_common_flags()],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.set_defaults(seed=None, out=Path("runs"), threads=1, tag_format="binary", verbose=0)
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    commands.required = True

    simulate = commands.add_parser("simulate", parents=[common], help="Simulate a scenario into a new run directory.")
    simulate.add_argument("config", type=Path, help="Scenario .cfg file.")

    sync = commands.add_parser("sync", parents=[common], help="Track Bob's clock drift in a simulated run.")
    sync.add_argument("run_dir", type=Path, help="Run directory created by simulate.")
    sync.add_argument("--truth-clock", action="store_true", help="Correct with the simulated clock instead of tracking it.")
    _sync_flags(sync)

    analyze = commands.add_parser("analyze", parents=[common], help="Discretize and score every block at every dimension.")
    analyze.add_argument("run_dir", type=Path, help="Run directory with a completed sync stage.")
    analyze.add_argument("--export-matrices", action="store_true", help="Write one CSV per matrix per block and d.")
    _analysis_flags(analyze)

    report = commands.add_parser("report", parents=[common], help="Write report.csv, best_dimension.csv and report.xlsx.")
    report.add_argument("run_dir", type=Path, help="Run directory with a completed analyze stage.")

    pipeline = commands.add_parser("pipeline", parents=[common], help="simulate, sync, analyze and report in one run.")
    pipeline.add_argument("config", type=Path, help="Scenario .cfg file.")
    pipeline.add_argument("--truth-clock", action="store_true", help="Skip drift tracking and use the simulated clock.")
    pipeline.add_argument("--export-matrices", action="store_true", help="Write one CSV per matrix per block and d.")
    _sync_flags(pipeline)
    _analysis_flags(pipeline)

    sweep = commands.add_parser("sweep", parents=[common], help="Key rate and witness versus background level and d.")
    sweep.add_argument("config", type=Path, help="Scenario .cfg file.")
    sweep.add_argument(
        "--noise-levels",
        type=_float_list,
        default=list(DEFAULT_NOISE_LEVELS),
        help="Multipliers of Bob's background profile (default: 0,0.5,1,2,4,8,12,20).",
    )
    sweep.add_argument("--duration", type=float, help="Override the session duration in seconds.")
    sweep.add_argument("--truth-clock", action="store_true", help="Skip drift tracking and use the simulated clock.")
    _sync_flags(sweep)
    _analysis_flags(sweep)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse CLI arguments."""

    return build_parser().parse_args(argv)


def configure_logging(verbose: int) -> None:
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, os.environ.get(LOG_LEVEL_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


# flag attribute -> (config section, field)
OVERRIDE_FLAGS = {
    "d_list": ("analysis", "d_list"),
    "tau_mzi": ("analysis", "tau_mzi_ps"),
    "block_len": ("analysis", "block_len_s"),
    "grid_phase": ("analysis", "grid_phase_ps"),
    "weighting": ("analysis", "weighting"),
    "sync_block_len": ("sync", "block_len_s"),
    "coarse_bin": ("sync", "coarse_bin_ps"),
    "coarse_window": ("sync", "coarse_window_ps"),
    "fine_bin": ("sync", "fine_bin_ps"),
    "fine_window": ("sync", "fine_window_ps"),
    "min_significance": ("sync", "min_significance"),
    "duration": ("session", "duration_s"),
}


def config_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, object]]:
    """Collect the override flags that were given, grouped by config section."""

    overrides: Dict[str, Dict[str, object]] = {}
    for flag, (section, key) in OVERRIDE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return overrides


def apply_overrides(config: ScenarioConfig, overrides: Dict[str, Dict[str, object]]) -> ScenarioConfig:
    """Re-validate the scenario with command-line overrides applied."""

    if not overrides:
        return config
    snapshot = config.model_dump()
    for section, values in overrides.items():
        snapshot[section] = {**snapshot[section], **values}
    try:
        return ScenarioConfig.model_validate(snapshot)
    except ValidationError as exc:
        raise ConfigError(f"invalid command-line override\n{format_validation_error(exc)}") from exc


def _load(args: argparse.Namespace) -> ScenarioConfig:
    config = load_scenario(args.config).with_seed(args.seed)
    return apply_overrides(config, config_overrides(args))


def _create(args: argparse.Namespace, config: ScenarioConfig) -> PipelineService:
    overrides = config_overrides(args)
    return PipelineService.create(
        args.out,
        config,
        command=args.command,
        threads=args.threads,
        tag_format=args.tag_format,
        parameters={"overrides": overrides} if overrides else None,
    )


def _summarize_best(service: PipelineService, best: pd.DataFrame) -> str:
    certified = int((best["witness_avg"].astype(float) > 1.5).sum()) if len(best) else 0
    dims = best["best_d"].dropna().astype(int).tolist()
    spread = f"best d {min(dims)}..{max(dims)}" if dims else "no positive key"
    peak = best["key_rate_bps"].max() if len(best) else None
    return (
        f"{len(best)} blocks, {certified} certified, {spread}, peak {format_rate(peak)} -> {service.run_dir}"
    )


def _override_run(service: PipelineService, args: argparse.Namespace) -> None:
    overrides = config_overrides(args)
    if overrides:
        service.config = apply_overrides(service.config, overrides)
        service.manifest.config = service.config.model_dump(mode="json")
        service.manifest.parameters.setdefault("overrides", {}).update(overrides)


def cmd_simulate(args: argparse.Namespace) -> str:
    service = _create(args, _load(args))
    counts = service.simulate()
    return (
        f"Simulated {counts['pairs']} pairs: {counts['alice_tags']} Alice tags, {counts['bob_tags']} Bob tags"
        f" ({counts['both_detected']} pairs seen by both) -> {service.run_dir}"
    )


def cmd_sync(args: argparse.Namespace) -> str:
    service = PipelineService.open(args.run_dir, threads=args.threads)
    _override_run(service, args)
    model = service.sync(truth_clock=args.truth_clock)
    return (
        f"Clock model with {model.knots_s.size} knots ({int(model.flagged.sum())} flagged),"
        f" offset {format_ps(float(model.offsets_ps[0]))}, drift {model.slope_ps_per_s():.2f} ps/s"
    )


def cmd_analyze(args: argparse.Namespace) -> str:
    service = PipelineService.open(args.run_dir, threads=args.threads)
    _override_run(service, args)
    scans = service.analyze(export_matrices=args.export_matrices)
    positive = sum(1 for scan in scans if scan.best_d is not None)
    return f"Analyzed {len(scans)} blocks; {positive} with positive key -> {service.run_dir / 'analysis.csv'}"


def cmd_report(args: argparse.Namespace) -> str:
    service = PipelineService.open(args.run_dir, threads=args.threads)
    return _summarize_best(service, service.report())


def cmd_pipeline(args: argparse.Namespace) -> str:
    service = _create(args, _load(args))
    best = service.pipeline(truth_clock=args.truth_clock, export_matrices=args.export_matrices)
    return _summarize_best(service, best)


def cmd_sweep(args: argparse.Namespace) -> str:
    service = _create(args, _load(args))
    table = service.sweep(args.noise_levels, truth_clock=args.truth_clock)
    best = table.drop_duplicates(["noise_level", "block_id"])
    zero_key = int(best["best_d"].isna().sum())
    return (
        f"Swept {len(args.noise_levels)} noise levels x {table['d'].nunique()} dimensions;"
        f" {zero_key} of {len(best)} blocks without key -> {service.run_dir / 'sweep.csv'}"
    )


COMMANDS = {
    "simulate": cmd_simulate,
    "sync": cmd_sync,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point; returns the process exit status."""

    args = parse_args(argv)
    configure_logging(args.verbose)
    logger.debug("Running %s with %s.", args.command, vars(args))
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return USAGE_EXIT
    try:
        summary = COMMANDS[args.command](args)
    except TimebinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT
    print(summary)
    return 0


__all__ = ["build_parser", "main", "parse_args"]
