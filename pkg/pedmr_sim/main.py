"""
Command line entry point: pedmr experiments, fitting and sequence checking.

    python app.py rabi --config configs/rabi.cfg --out outputs/rabi
    python app.py echo-decay --points 16 --seed 3
    python app.py fit outputs/decay.csv --model monoexp --baseline
    python app.py parse-check my_sequence.pseq
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import sequence_dsl
from .analysis import fit_gaussian, fit_monoexp, load_series_csv, subtract_linear_background
from .config import LOG_FORMAT, LOG_LEVEL
from .errors import (
    ConfigurationError,
    DegenerateStateError,
    FitError,
    InvalidArgumentError,
    SequenceCompileError,
    SequenceParseError,
)
from .experiments import ExperimentRunner
from .models import load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_FIT = 4

EXPERIMENT_COMMANDS = ("rabi", "echo-map", "echo-decay", "spectrum", "inversion-recovery", "sequence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedmr", description="Pulsed EDMR spin-pair simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENT_COMMANDS:
        sub = commands.add_parser(name, help=f"Run the {name} experiment")
        sub.add_argument("--config", type=Path, help="key=value run configuration")
        sub.add_argument("--out", type=Path, help="Output directory")
        sub.add_argument("--seed", type=int, help="Seed for monte-carlo quadrature")
        sub.add_argument("--points", type=int, help="Quadrature points per spin")
        sub.add_argument("--sequence", type=Path,
                         help="Custom .pseq program (sequence command)")
        sub.add_argument("--transient", action="store_true",
                         help="Also write the current transient of the largest-|Q| point")
        sub.add_argument("--workers", type=int, help="Threads used over field lines")

    fit = commands.add_parser("fit", help="Fit a CSV series with columns x,y[,sigma]")
    fit.add_argument("data", type=Path)
    fit.add_argument("--model", choices=["monoexp", "gaussian"], default="monoexp")
    fit.add_argument("--baseline", action="store_true",
                     help="Subtract a line fitted on the last 25%% of x first")
    fit.add_argument("--out", type=Path, help="Directory for fit.csv")

    check = commands.add_parser("parse-check", help="Report diagnostics for a .pseq file")
    check.add_argument("sequence", type=Path)
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT)


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {
        "experiment": args.command,
        "output_dir": args.out,
        "seed": args.seed,
        "quadrature.points_per_spin": args.points,
    }
    if args.sequence is not None:
        overrides["sequence.path"] = args.sequence
    return overrides


def run_experiment(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, _overrides(args))
    runner = ExperimentRunner(config, transient=args.transient, workers=args.workers)
    result = runner.run()
    if result.fit is not None:
        sys.stdout.write(result.fit.to_text())
    if not result.converged:
        logger.error(f"{args.command}: fit did not converge, data written to {result.output_dir}")
        return EXIT_FIT
    return EXIT_OK


def run_fit(args: argparse.Namespace) -> int:
    series = load_series_csv(args.data)
    if args.baseline:
        series = subtract_linear_background(series)
    if args.model == "monoexp":
        result = fit_monoexp(series, offset=0.0 if args.baseline else None)
    else:
        result = fit_gaussian(series)
    sys.stdout.write(result.to_text())
    out = args.out or args.data.parent
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "fit.csv")
    if not result.converged:
        raise FitError(f"{args.model} fit did not converge: {result.message}", result)
    return EXIT_OK


def run_parse_check(args: argparse.Namespace) -> int:
    if not args.sequence.is_file():
        raise ConfigurationError(f"sequence file not found: {args.sequence}")
    diagnostics = sequence_dsl.check(sequence_dsl.load_sequence(args.sequence))
    for diagnostic in diagnostics:
        print(f"{args.sequence}:{diagnostic}")
    if diagnostics:
        return EXIT_PARSE
    print(f"{args.sequence}: ok")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "fit":
            return run_fit(args)
        if args.command == "parse-check":
            return run_parse_check(args)
        return run_experiment(args)
    except SequenceParseError as exc:
        for diagnostic in exc.diagnostics:
            logger.error(str(diagnostic))
        return EXIT_PARSE
    except SequenceCompileError as exc:
        logger.error(f"Cannot compile sequence: {exc}")
        return EXIT_PARSE
    except (ConfigurationError, InvalidArgumentError, DegenerateStateError) as exc:
        logger.error(f"Configuration error: {exc}", exc_info=args.verbose)
        return EXIT_CONFIG
    except FitError as exc:
        logger.error(str(exc))
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
