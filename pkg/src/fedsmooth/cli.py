"""Command-line entry point: ``fedsmooth {train,certify,bench,ablate}``."""

from __future__ import annotations

import argparse
import sys

from fedsmooth import experiments
from fedsmooth.config import CHOICES, parse_config
from fedsmooth.errors import ConfigError, FormatError, NumericError, ShapeError

COMMANDS = {
    "train": experiments.cmd_train,
    "certify": experiments.cmd_certify,
    "bench": experiments.cmd_bench,
    "ablate": experiments.cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", choices=CHOICES["preset"])
    common.add_argument("--mode", choices=CHOICES["mode"])
    common.add_argument("--ablation", choices=CHOICES["ablation"])
    common.add_argument("--sigma", type=float, help="smoothing noise level")
    common.add_argument("--epsilon", type=float, help="l2 attack budget on the 0-255 pixel scale")
    common.add_argument("--estimator", choices=CHOICES["estimator"])
    common.add_argument("--gamma", type=float, help="share of each device's data from its major class")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="parameter file (certify, bench)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="fedsmooth", description="Federated randomized-smoothing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write a checkpoint plus round log")
    sub.add_parser("certify", parents=[common], help="certify a checkpoint into a certified-accuracy CSV")
    sub.add_parser("bench", parents=[common], help="time the stochastic and one-point estimators")
    sub.add_parser("ablate", parents=[common], help="train and certify all three ablations")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("preset", "mode", "ablation", "sigma", "epsilon", "estimator", "gamma", "seed", "out", "checkpoint"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda _msg: None) if args.quiet else print
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        COMMANDS[args.command](cfg, log=log)
    except (ConfigError, FormatError, NumericError, ShapeError, OSError, ValueError) as exc:
        print(f"fedsmooth {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
