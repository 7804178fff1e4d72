"""Command line entry point: ``compfeinn <subcommand> [--config F] [--seed S] [--out D]``."""

import argparse
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from .experiments.config import ConfigError, ExperimentConfig, load_config

# subcommand -> (problem kind implied when the config does not set one, driver name)
COMMANDS = {
    "fem-convergence": (None, "run_fem_convergence"),
    "forward-maxwell": ("maxwell", "run_forward_feinn"),
    "forward-darcy-sphere": ("darcy_sphere", "run_darcy_sphere"),
    "inverse-maxwell": ("inverse_maxwell", "run_inverse_maxwell"),
    "indicators": ("maxwell", "run_indicators"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="compfeinn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment file")
        p.add_argument("--seed", type=int, help="run this single seed instead of problem.seeds")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS threads; 1 keeps runs bit-reproducible")
        p.add_argument("--figures", action="store_true", help="also render PNG figures")
    rep = sub.add_parser("report", help="render figures from the CSVs of an output directory")
    rep.add_argument("out")
    return parser


def resolve_config(args, default_kind):
    config = load_config(args.config) if args.config else ExperimentConfig()
    problem = config.problem
    if default_kind is not None and not args.config:
        problem = replace(problem, kind=default_kind)
        if default_kind == "darcy_sphere":
            problem = replace(problem, case="darcy_sphere")
        elif default_kind == "inverse_maxwell":
            problem = replace(problem, case="inverse_" + config.observations.mode)
    if args.seed is not None:
        problem = replace(problem, seeds=[args.seed])
    output = config.output
    if args.out:
        output = replace(output, dir=args.out)
    if args.figures:
        output = replace(output, figures=True)
    return replace(config, problem=problem, output=output).validate()


def _driver(name):
    from .experiments import drivers, indicators
    return getattr(drivers, name, None) or getattr(indicators, name)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        from .experiments.plotting import render_report
        for path in render_report(args.out):
            print(path)
        return 0
    kind, name = COMMANDS[args.command]
    try:
        config = resolve_config(args, kind)
    except (ConfigError, OSError) as exc:
        print(f"compfeinn: {exc}", file=sys.stderr)
        return 2
    with threadpool_limits(limits=args.threads):
        _driver(name)(config, config.output.dir)
    if config.output.figures:
        from .experiments.plotting import render_report
        render_report(config.output.dir)
    print(config.output.dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
