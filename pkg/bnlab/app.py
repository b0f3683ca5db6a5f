"""
Command-line entry point: verify | run <config> | sweep <config>.
"""
import argparse
import logging
import sys

from bnlab.commands import run as run_cmd
from bnlab.commands import sweep as sweep_cmd
from bnlab.commands import verify as verify_cmd
from bnlab.config import EXIT_CONFIG, EXIT_DIVERGED, EXIT_GATE, PRECISIONS
from bnlab.exceptions import ConfigError, DivergenceError, FormatError, GateFailure, LabError
from bnlab.extensions import configure_logging

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("--precision", choices=sorted(PRECISIONS), default=None, help="Floating-point mode")
    common.add_argument("--override-gates", action="store_true", help="Run even if oracle gates fail")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")

    parser = argparse.ArgumentParser(prog="bnlab", description="Federated learning with BN control variates")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in (verify_cmd, run_cmd, sweep_cmd):
        command.register(subparsers, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except (ConfigError, FormatError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except GateFailure as exc:
        logger.error("%s (pass --override-gates to run anyway)", exc)
        return EXIT_GATE
    except DivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED
    except LabError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
