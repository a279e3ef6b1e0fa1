#!/usr/bin/env python3
"""
SCSA Engine - Command Line Interface

Single entry point for the attention engine:

    python main.py gradcheck [--tol 1e-4] [--seed 0] [--filter smsa]
    python main.py ablate (--preset NAME | --all) [--config cfg.json] [--train-epochs N]
    python main.py train [--config cfg.json] [--attention on|off] [--seed N] [--log run.jsonl]
    python main.py bench [--sweep "C=16;HW=28,56,112"] [--output bench.csv]
    python main.py dump (--checkpoint FILE | --tensor FILE)
    python main.py --print-defaults

Exit codes: 0 ok, 1 validation error, 2 numerical failure (including a
failed gradient check), 3 I/O error. SCSA_SEED overrides every seed that
is not given on the command line.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from bench import bench, parse_sweep
from config import (
    BENCH_BATCH,
    BENCH_REPEATS,
    BENCH_WARMUP,
    DEFAULT_SEED,
    print_config_summary,
    seed_override,
)
from dataset import generate_dataset
from exceptions import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    ConfigurationError,
    ScsaError,
    ShapeError,
    exit_code_for,
)
from formatters import (
    ConsoleWriter,
    FileWriter,
    format_ablation_csv,
    format_bench_csv,
    format_checkpoint_summary,
    format_flop_breakdown,
    format_suite_report,
    format_training_summary,
)
from gradcheck_suite import build_cases, run_case, run_gradcheck_suite
from models import CliConfig
from ops import DIFFERENTIABLE_OPS
from scsa import AblationPreset, ablation_registry, flop_estimate, get_preset, init_scsa_params, scsa_forward
from tensor import ParamStore, Tensor, count_parameters, load_checkpoint, load_tensor, make_rng
from trainer import train

__version__ = "1.0.0"

DEFAULT_LOG_FILE = "scsa_debug.log"
DEFAULT_SWEEP = "C=16;HW=28,56,112"

# Reference point for the FLOP and parameter columns of the ablation table
ABLATION_FLOP_POINT = (64, 56, 56)
# Input used for the per-preset shape check
ABLATION_SHAPE_CHECK = (2, 8, 12, 12)


# ============================================================================
# LOGGING SETUP
# ============================================================================

def setup_logging(verbose: bool = False, quiet: bool = False,
                  log_file: Optional[str] = None, no_log_file: bool = False) -> None:
    """
    Configure logging for the application.

    Args:
        verbose: Enable DEBUG level logging to console
        quiet: Show only WARNING and above to console
        log_file: Custom log file path (default: scsa_debug.log)
        no_log_file: Disable file logging entirely
    """
    if verbose:
        console_level = logging.DEBUG
    elif quiet:
        console_level = logging.WARNING
    else:
        console_level = logging.INFO

    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    handlers: List[logging.Handler] = []

    # Console output goes to stderr so CSV on stdout stays clean
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(logging.Formatter(log_format))
    handlers.append(console_handler)

    if not no_log_file:
        log_file_path = log_file if log_file else DEFAULT_LOG_FILE
        try:
            file_handler = logging.FileHandler(log_file_path, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(log_format))
            handlers.append(file_handler)
        except (PermissionError, OSError) as e:
            print(f"Warning: Could not create log file '{log_file_path}': {e}", file=sys.stderr)
            print("   Continuing without file logging.", file=sys.stderr)

    logging.basicConfig(
        level=logging.DEBUG,
        format=log_format,
        handlers=handlers,
        force=True
    )


logger = logging.getLogger(__name__)


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a number")
    if not np.isfinite(value) or value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive number (got {text})")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0 (got {text})")
    return value


def _add_logging_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('Logging Options')
    group.add_argument('-v', '--verbose', action='store_true',
                       help='Enable verbose (DEBUG) console logging')
    group.add_argument('-q', '--quiet', action='store_true',
                       help='Only show warnings and errors on the console')
    group.add_argument('--log-file', type=str, metavar='PATH',
                       help=f'Debug log file path (default: {DEFAULT_LOG_FILE})')
    group.add_argument('--no-log-file', action='store_true',
                       help='Disable the debug log file')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='scsa',
        description='SCSA attention engine: gradient checks, ablations, toy training and benchmarks',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gradcheck --filter smsa
  %(prog)s ablate --all --train-epochs 2 --output ablation.csv
  %(prog)s train --attention off --seed 3 --log baseline.jsonl
  %(prog)s bench --sweep "preset=baseline,wo-pcsa;C=16;HW=28,56"
  %(prog)s dump --checkpoint run.scsk

Environment:
  SCSA_SEED=N          seed for every command unless --seed is given
  SCSA_DEBUG_CHECKS=1  check every op output for NaN/Inf
        """
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--print-defaults', action='store_true',
                        help='Print the default configuration file as JSON and exit')
    parser.add_argument('--print-constants', action='store_true',
                        help='Print the built-in constants and exit')
    _add_logging_options(parser)

    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    gc = sub.add_parser('gradcheck', help='Run the finite-difference gradient check suite')
    gc.add_argument('--tol', type=_positive_float, metavar='TOL',
                    help='Relative tolerance for every check (default: per check)')
    gc.add_argument('--seed', type=_non_negative_int, metavar='N', help='Seed for inputs and cotangents')
    gc.add_argument('--filter', type=str, metavar='PATTERN',
                    help='Only run checks whose name contains PATTERN (globs allowed)')
    gc.add_argument('--corrupt-backward', type=str, metavar='OP', choices=sorted(DIFFERENTIABLE_OPS),
                    help='Scale OP\'s backward by 1.1 (negative control; the run must fail)')
    gc.add_argument('--json', action='store_true', help='Print the report as JSON')

    ab = sub.add_parser('ablate', help='Evaluate ablation presets')
    which = ab.add_mutually_exclusive_group(required=True)
    which.add_argument('--preset', type=str, metavar='NAME', help='Run one preset')
    which.add_argument('--all', action='store_true', help='Run every preset')
    ab.add_argument('--config', type=str, metavar='FILE', help='JSON configuration (dataset, train, backbone)')
    ab.add_argument('--train-epochs', type=_non_negative_int, default=0, metavar='N',
                    help='Toy-train each preset for N epochs and report val accuracy (default: 0, skip)')
    ab.add_argument('--seed', type=_non_negative_int, metavar='N', help='Seed for checks and training')
    ab.add_argument('--output', type=str, metavar='FILE', help='Write the CSV table to FILE')

    tr = sub.add_parser('train', help='Train the toy backbone on the synthetic dataset')
    tr.add_argument('--config', type=str, metavar='FILE', help='JSON configuration file')
    tr.add_argument('--attention', choices=['on', 'off'], help='Override backbone.attention')
    tr.add_argument('--seed', type=_non_negative_int, metavar='N', help='Seed for data and training')
    tr.add_argument('--log', type=str, metavar='FILE',
                    help='Write the per-epoch JSON log to FILE (default: stdout)')
    tr.add_argument('--checkpoint', type=str, metavar='FILE', help='Save final parameters to FILE')

    be = sub.add_parser('bench', help='Time scsa_forward over a sweep and report FLOPs')
    be.add_argument('--sweep', type=str, default=DEFAULT_SWEEP, metavar='SPEC',
                    help=f'Sweep, e.g. "{DEFAULT_SWEEP}" (keys: preset, C, H, W, HW)')
    be.add_argument('--repeats', type=int, default=BENCH_REPEATS, metavar='N',
                    help=f'Timed runs per point (minimum {BENCH_REPEATS})')
    be.add_argument('--warmup', type=int, default=BENCH_WARMUP, metavar='N',
                    help=f'Warm-up runs per point (minimum {BENCH_WARMUP})')
    be.add_argument('--batch', type=int, default=BENCH_BATCH, metavar='N',
                    help=f'Images per timed call (default: {BENCH_BATCH})')
    be.add_argument('--seed', type=_non_negative_int, metavar='N', help='Seed for inputs and parameters')
    be.add_argument('--flops', action='store_true', help='Also log the FLOP breakdown of every point')
    be.add_argument('--output', type=str, metavar='FILE', help='Write the CSV to FILE')

    du = sub.add_parser('dump', help='Inspect a checkpoint or tensor dump')
    src = du.add_mutually_exclusive_group(required=True)
    src.add_argument('--checkpoint', type=str, metavar='FILE', help='Checkpoint (SCSK) file')
    src.add_argument('--tensor', type=str, metavar='FILE', help='Single tensor (SCST) file')

    return parser


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    Parse command line arguments.

    Raises:
        SystemExit: On --help, --version or invalid arguments (argparse)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose and args.quiet:
        parser.error("--verbose and --quiet are mutually exclusive")
    if args.command is None and not (args.print_defaults or args.print_constants):
        parser.error("a command is required (gradcheck, ablate, train, bench, dump)")
    return args


# ============================================================================
# SHARED HELPERS
# ============================================================================

def load_config(path: Optional[str]) -> CliConfig:
    """
    Read a JSON configuration file; None gives the defaults.

    Raises:
        OSError: If the file cannot be read
        ConfigurationError: On malformed JSON or invalid values (with key path)
    """
    if path is None:
        return CliConfig()
    with open(path, encoding='utf-8') as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from None
    config = CliConfig.from_dict(data)
    logger.info(f"Loaded configuration from {path}")
    return config


def resolve_seed(flag: Optional[int], fallback: int = DEFAULT_SEED) -> int:
    """--seed wins, then SCSA_SEED, then fallback."""
    if flag is not None:
        return flag
    try:
        env = seed_override()
    except ValueError as e:
        raise ConfigurationError(str(e), "SCSA_SEED") from None
    return fallback if env is None else env


def _writer(path: Optional[str]):
    return FileWriter(path) if path else ConsoleWriter()


# ============================================================================
# ABLATION RUNS
# ============================================================================

@dataclass(frozen=True)
class AblationRow:
    """One row of the ablation table; val_acc is None when training was skipped."""
    preset: str
    shape_ok: bool
    gradcheck_max_rel_err: float
    gradcheck_passed: bool
    flops: int
    params: int
    val_acc: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.shape_ok and self.gradcheck_passed

    def csv_fields(self) -> List[str]:
        return [
            self.preset,
            str(self.shape_ok).lower(),
            f"{self.gradcheck_max_rel_err:.3e}",
            str(self.gradcheck_passed).lower(),
            str(self.flops),
            str(self.params),
            "" if self.val_acc is None else f"{self.val_acc:.4f}",
        ]


def run_ablation(preset: AblationPreset, cli_config: CliConfig, seed: int = DEFAULT_SEED,
                 train_epochs: int = 0) -> AblationRow:
    """
    Evaluate one preset: shape check, gradient check, FLOPs, parameters and
    optionally a short toy-training run.

    Args:
        preset: The preset to evaluate
        cli_config: Supplies dataset, train and backbone settings for training
        seed: Seed for the random input, the gradient check and training
        train_epochs: Epochs of toy training (0 skips training)

    Returns:
        AblationRow: The table row
    """
    cfg = preset.config
    logger.info(f"Ablation preset '{preset.name}': {preset.description}")

    rng = make_rng(seed)
    store = ParamStore()
    channels = ABLATION_SHAPE_CHECK[1]
    params = init_scsa_params(store, channels, cfg, rng)
    x = Tensor(rng.standard_normal(ABLATION_SHAPE_CHECK))
    try:
        out = scsa_forward(x, params, cfg, training=False)
        shape_ok = out.shape == x.shape and bool(np.all(np.isfinite(out.data)))
    except (ShapeError, ConfigurationError) as e:
        logger.error(f"{preset.name}: forward failed: {e}")
        shape_ok = False

    case = next(c for c in build_cases() if c.name == f"scsa.{preset.name}")
    report = run_case(case, seed)
    logger.debug(str(report))

    c, h, w = ABLATION_FLOP_POINT
    flops = flop_estimate(c, h, w, cfg).total
    count_store = ParamStore()
    init_scsa_params(count_store, c, cfg, make_rng(seed))
    n_params = count_parameters(count_store)

    val_acc = None
    if train_epochs > 0:
        data = generate_dataset(replace(cli_config.dataset, seed=seed))
        spec = replace(cli_config.train, epochs=train_epochs, seed=seed)
        backbone = replace(cli_config.backbone, attention="scsa")
        val_acc = train(backbone, cfg, data, spec).final_val_acc

    return AblationRow(preset.name, shape_ok, report.max_rel_error, report.passed, flops, n_params, val_acc)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    report = run_gradcheck_suite(tol=args.tol, seed=seed, pattern=args.filter,
                                 corrupt_op=args.corrupt_backward)
    if not report.results:
        raise ConfigurationError(f"no gradient checks match '{args.filter}'", "--filter")
    writer = ConsoleWriter()
    if args.json:
        writer.write(json.dumps(report.to_dict(), indent=2))
    else:
        writer.write_lines(format_suite_report(report))
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_ablate(args: argparse.Namespace) -> int:
    cli_config = load_config(args.config)
    presets = ablation_registry() if args.all else [get_preset(args.preset)]
    seed = resolve_seed(args.seed, cli_config.train.seed)

    rows = [run_ablation(p, cli_config, seed, args.train_epochs) for p in presets]
    _writer(args.output).write_lines(format_ablation_csv(rows))

    failed = [r.preset for r in rows if not r.ok]
    if failed:
        logger.error(f"Presets failing shape or gradient checks: {', '.join(failed)}")
        return EXIT_NUMERICAL
    logger.info(f"All {len(rows)} presets passed")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cli_config = load_config(args.config)
    backbone = cli_config.backbone
    if args.attention is not None:
        backbone = replace(backbone, attention="scsa" if args.attention == "on" else "none")
    seed = resolve_seed(args.seed, cli_config.train.seed)
    data = generate_dataset(replace(cli_config.dataset, seed=seed))
    spec = replace(cli_config.train, seed=seed)

    if args.log:
        with open(args.log, "w", encoding="utf-8") as log_stream:
            result = train(backbone, cli_config.scsa, data, spec, log_stream, args.checkpoint)
    else:
        result = train(backbone, cli_config.scsa, data, spec, sys.stdout, args.checkpoint)

    for line in format_training_summary(f"attention={backbone.attention} seed={seed}", result):
        logger.info(line)
    if args.checkpoint:
        logger.info(f"Checkpoint written to {args.checkpoint}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    points = parse_sweep(args.sweep)
    seed = resolve_seed(args.seed)
    rows = bench(points, repeats=args.repeats, warmup=args.warmup, batch=args.batch, seed=seed)
    if args.flops:
        for point in points:
            breakdown = flop_estimate(point.channels, point.height, point.width,
                                      get_preset(point.preset).config)
            for line in format_flop_breakdown(breakdown, point.channels, point.height, point.width):
                logger.info(f"[{point.preset}] {line}")
    _writer(args.output).write_lines(format_bench_csv(rows))
    return EXIT_OK


def cmd_dump(args: argparse.Namespace) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    else:
        state = {args.tensor: load_tensor(args.tensor)}
    ConsoleWriter().write_lines(format_checkpoint_summary(state))
    return EXIT_OK


COMMANDS = {
    'gradcheck': cmd_gradcheck,
    'ablate': cmd_ablate,
    'train': cmd_train,
    'bench': cmd_bench,
    'dump': cmd_dump,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def run(argv: Optional[Sequence[str]] = None, configure_logging: bool = True) -> int:
    """
    Parse argv, run the command and return the exit code.

    Errors are caught here, logged, and mapped to exit codes; tracebacks are
    only logged with --verbose.
    """
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; usage errors are validation errors here
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION

    if configure_logging:
        setup_logging(verbose=args.verbose, quiet=args.quiet,
                      log_file=args.log_file, no_log_file=args.no_log_file)
    logger.debug(f"Arguments: {vars(args)}")

    if args.print_defaults:
        ConsoleWriter().write(json.dumps(CliConfig().to_dict(), indent=2))
        return EXIT_OK
    if args.print_constants:
        ConsoleWriter().write(print_config_summary())
        return EXIT_OK

    try:
        return COMMANDS[args.command](args)
    except (ScsaError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.verbose)
        return exit_code_for(e)


def main() -> None:
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(EXIT_OK)
    except Exception as e:
        logger.critical(f"Fatal error: {e}", exc_info=True)
        sys.exit(EXIT_VALIDATION)


if __name__ == "__main__":
    main()
