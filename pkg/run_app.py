import argparse
import sys

from src.mpgpmd.app import ExperimentApp, configure_logging
from src.mpgpmd.errors import ConfigError

VERBS = ("run", "sweep", "certify", "bounds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpgpmd",
        description="Exact independent policy mirror descent experiments on Markov potential games.",
    )
    subparsers = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sub = subparsers.add_parser(verb)
        sub.add_argument("config", help="path to an experiment config (JSON)")
        sub.add_argument("--out", default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None, help="run a single seed")
        sub.add_argument("--trust-mpg", action="store_true", help="skip potential-game verification")
        sub.add_argument("--epsilon", type=float, default=None, help="single epsilon target")
        sub.add_argument("--format", choices=("csv", "json"), default=None, dest="output_format")
        sub.add_argument("--quiet", action="store_true", help="hide progress bars")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    overrides = {
        "out": args.out,
        "seed": args.seed,
        "trust_mpg": args.trust_mpg,
        "epsilon": args.epsilon,
        "output_format": args.output_format,
    }
    try:
        app = ExperimentApp(args.config, overrides=overrides, progress=not args.quiet)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2

    result = app.dispatch(args.verb)
    status = "✅" if ExperimentApp.exit_code(result) == 0 else "❌"
    print(f"{status} {args.verb}: {result.get('message')}")
    return ExperimentApp.exit_code(result)


if __name__ == "__main__":
    sys.exit(main())
