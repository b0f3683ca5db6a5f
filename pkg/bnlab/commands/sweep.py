"""
sweep <config> --axis <field> --values <list>: one experiment per value and algorithm.
"""
from bnlab.commands.run import apply_overrides
from bnlab.config import EXIT_OK
from bnlab.exceptions import ConfigError
from bnlab.models.experiment import load_config
from bnlab.services.experiment_service import run_sweep


def _split(raw):
    return [item.strip() for item in raw.split(",") if item.strip()] if raw else []


def register(subparsers, parents=()):
    parser = subparsers.add_parser("sweep", parents=list(parents), help="Sweep one config field over a list of values")
    parser.add_argument("config", help="Path to the base experiment TOML file")
    parser.add_argument("--axis", required=True, help="Dotted field or alias (p, N, E, B, rho, lr, algorithm)")
    parser.add_argument("--values", required=True, help="Comma-separated values")
    parser.add_argument("--algorithms", default=None,
                        help="Comma-separated algorithms (default: the config's; not with --axis algorithm)")
    parser.add_argument("--jobs", type=int, default=1, help="Parallel worker processes")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    values = _split(args.values)
    if not values:
        raise ConfigError("no values given", field="--values")
    if args.jobs < 1:
        raise ConfigError("jobs must be >= 1", field="--jobs")
    config = apply_overrides(load_config(args.config), args)
    run_sweep(config, args.axis, values, algorithms=_split(args.algorithms) or None,
              override_gates=args.override_gates, jobs=args.jobs)
    return EXIT_OK
