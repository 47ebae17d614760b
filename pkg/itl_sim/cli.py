"""Command-line front end: ``itl-sim run|validate|baseline|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .config import ExperimentConfig, config_hash, parse_config
from .errors import ConfigError, ITLError
from .metrics_report import SIGNIFICANCE_TESTS, Summary, emit_results, load_runs, summarize
from .runner import BASELINES, EXIT_FAILED, EXIT_INVALID, EXIT_OK, parse_seeds, run_experiment

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, handlers=handlers, force=True)
    return logging.getLogger("itl_sim")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", help="Path to a JSON experiment config")
    parser.add_argument(
        "--seeds", help="Repeat count ('10' runs ten seeds from seed_base) or explicit seeds ('0,3,7', '0-9', '4-4')"
    )
    parser.add_argument("--out", help="Output directory (default: config output_dir, $ITL_SIM_OUTPUT_DIR, ./results)")
    parser.add_argument("--jobs", type=int, help="Worker processes for independent runs")
    parser.add_argument("--format", choices=["csv", "json"], default="csv", help="Result file format")
    parser.add_argument("--no-progress", action="store_true", help="Hide the progress bar")


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itl-sim",
        description="Simulate incremental transfer learning across data centers",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  itl-sim validate configs/desk_scale.json
  itl-sim run configs/desk_scale.json --seeds 3 --out results/desk
  itl-sim baseline joint configs/desk_scale.json --jobs 4
  itl-sim report results/desk
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-file", help="Also write log records to this file")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser("run", help="Run every method x scenario x seed plus enabled baselines")
    _add_run_options(run)

    validate = subparsers.add_parser("validate", help="Check a config and print its hash")
    validate.add_argument("config", help="Path to a JSON experiment config")

    baseline = subparsers.add_parser("baseline", help="Run only a joint or independent-training baseline")
    baseline.add_argument("kind", choices=BASELINES)
    _add_run_options(baseline)

    report = subparsers.add_parser("report", help="Recompute summaries from a results directory")
    report.add_argument("results_dir", help="Directory holding runs.json or runs.csv")
    report.add_argument("--out", help="Where to write the summary (default: the results directory)")
    report.add_argument("--format", choices=["csv", "json"], default="csv")
    report.add_argument("--reference", default="ft", help="Method every other method is tested against")
    report.add_argument("--test", choices=SIGNIFICANCE_TESTS, default="welch")
    return parser


def _seed_list(config: ExperimentConfig, text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    count, seeds = parse_seeds(text)
    if seeds is not None:
        return seeds
    return [config.seed_base + r for r in range(count)]


def _format_table(summaries: Sequence[Summary]) -> str:
    lines = [f"{'scenario':<16}{'method':<10}{'accuracy':>10}{'std':>8}{'mono':>8}  sig"]
    for s in summaries:
        mono = "-" if s.monotonicity != s.monotonicity else f"{s.monotonicity:.3f}"
        sig = s.significance.value if s.significance is not None else ""
        lines.append(f"{s.scenario:<16}{s.method:<10}{s.accuracy:>10.2f}{s.std:>8.2f}{mono:>8}  {sig}")
    return "\n".join(lines)


def _find_runs(results_dir: Path) -> Path:
    for name in ("runs.json", "runs.csv"):
        if (results_dir / name).is_file():
            return results_dir / name
    raise FileNotFoundError(f"no runs.json or runs.csv in {results_dir}")


def cmd_validate(args) -> int:
    config = parse_config(args.config)
    print(f"{args.config}: valid (hash {config_hash(config)})")
    return EXIT_OK


def cmd_run(args, baselines=None, methods=None, prefix="") -> int:
    config = parse_config(args.config)
    seeds = _seed_list(config, args.seeds)
    outcome = run_experiment(
        config,
        out_dir=args.out,
        format=args.format,
        jobs=args.jobs,
        seeds=seeds,
        progress=not args.no_progress,
        methods=methods,
        baselines=baselines,
        prefix=prefix,
    )
    print(_format_table(outcome.summaries))
    for kind, path in outcome.files.items():
        logger.info("wrote %s: %s", kind, path)
    return outcome.status


def cmd_baseline(args) -> int:
    return cmd_run(args, baselines=[args.kind], methods=[], prefix=f"{args.kind}_")


def cmd_report(args) -> int:
    results_dir = Path(args.results_dir)
    results = load_runs(_find_runs(results_dir))
    summaries = summarize(results, args.reference, args.test)
    out = Path(args.out) if args.out else results_dir
    summary = emit_results(summaries, out / f"report_summary.{args.format}", args.format, "summary")
    curves = emit_results(results, out / f"report_curves.{args.format}", args.format, "curves")
    print(_format_table(summaries))
    logger.info("wrote %s and %s", summary, curves)
    return EXIT_FAILED if any(r.failed for r in results) else EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "baseline": cmd_baseline, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # Bad --seeds text and other invalid inputs surface as ValueError.
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ITLError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
