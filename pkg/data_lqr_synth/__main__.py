import os
import sys
from argparse import ArgumentParser

from dotenv import load_dotenv
from loguru import logger

from data_lqr_synth.config import ConfigError, ExperimentConfig, load_config
from data_lqr_synth.harness import run_monte_carlo, run_pendulum, run_table1
from data_lqr_synth.reporting import ReportError, emit_report

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _add_common(parser: ArgumentParser):
    parser.add_argument("-c", "--config", default=None, help="key=value configuration file")
    parser.add_argument("--scenario", dest="noise", default=None,
                        help="Noise scenario, e.g. none, wgn:0.1, bias:0.05, sine:0.1, optionally @input/@state")
    parser.add_argument("-j", "--jobs", default=None, help="Number of worker processes")
    parser.add_argument("--seed", dest="master_seed", default=None, help="Master seed of the run")
    parser.add_argument("-o", "--out", dest="output_path", default=None, help="Output folder for the report")
    parser.add_argument("--log-level", default=os.getenv("SYNTH_LOG_LEVEL", "INFO"),
                        help="loguru level for the stderr sink")
    parser.add_argument("--no-progress", action="store_true", help="Disable the progress bar")

    taken = {"noise", "jobs", "master_seed", "output_path"}
    for name in ExperimentConfig.model_fields:
        if name in taken:
            continue
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        parser.add_argument(*flags, dest=name, default=None, help=f"Override '{name}'")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="synth", description="LQR synthesis from noisy data: seeded benchmark runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="Monte Carlo over random plants for one scenario"))
    _add_common(sub.add_parser("pendulum", help="Inverted pendulum experiment"))
    _add_common(sub.add_parser("table1", help="Full sweep over the noise scenarios and programs"))
    return parser


def _overrides(args) -> dict:
    skip = {"command", "config", "log_level", "no_progress"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    logger.remove()
    logger.add(sys.stderr, level=args.log_level.upper())

    overrides = _overrides(args)
    if args.command == "pendulum":
        overrides["plant"] = "pendulum"

    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    progress = not args.no_progress
    try:
        if args.command == "table1":
            rows, trials = run_table1(cfg, progress)
        elif args.command == "pendulum":
            row, trials = run_pendulum(cfg, progress)
            rows = [row]
        else:
            row, trials = run_monte_carlo(cfg, progress)
            rows = [row]
        emit_report(rows, trials, cfg.output_path, cfg)
    except ReportError as e:
        logger.error(str(e))
        return EXIT_FAILURE
    except Exception:
        logger.exception("Run failed")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
