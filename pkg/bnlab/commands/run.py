"""
run <config>: one experiment, gated on the oracle suite.
"""
from bnlab.config import EXIT_OK
from bnlab.models.experiment import load_config
from bnlab.services.experiment_service import run_experiment


def apply_overrides(config, args):
    """--precision and --out win over the file."""
    if args.precision:
        config = config.with_value("training.precision", args.precision)
    if args.out:
        config = config.with_value("output.directory", args.out)
    return config


def register(subparsers, parents=()):
    parser = subparsers.add_parser("run", parents=list(parents), help="Run one experiment from a TOML config")
    parser.add_argument("config", help="Path to the experiment TOML file")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    config = apply_overrides(load_config(args.config), args)
    run_experiment(config, override_gates=args.override_gates)
    return EXIT_OK
