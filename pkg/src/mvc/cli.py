"""Command line entry point.

    mvc data|train-base|train-control|sample-mv|gen3d-coarse|gen3d-fine|ablate-pose
        --config <file> [--seed N] [--override key=value ...]

sample-mv and gen3d-coarse additionally accept --prompt and --condition,
falling back to the ``sample`` section of the config.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .pipeline import (
    UserError,
    cmd_ablate_pose,
    cmd_data,
    cmd_gen3d_coarse,
    cmd_gen3d_fine,
    cmd_sample_mv,
    cmd_train_base,
    cmd_train_control,
)

COMMANDS = ("data", "train-base", "train-control", "sample-mv", "gen3d-coarse", "gen3d-fine", "ablate-pose")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvc", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config file (defaults apply without one)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
        if name in ("sample-mv", "gen3d-coarse"):
            p.add_argument("--prompt", default=None, help="prompt text over the fixed vocabulary")
            p.add_argument("--condition", default=None, help="condition image path (edge map)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, overrides=args.override, seed=args.seed)
        if args.command == "data":
            out = cmd_data(config)
            print(f"dataset written to {out}")
        elif args.command == "train-base":
            out = cmd_train_base(config)
            print(f"base checkpoint written to {out}")
        elif args.command == "train-control":
            out = cmd_train_control(config)
            print(f"control checkpoint written to {out}")
        elif args.command == "sample-mv":
            result = cmd_sample_mv(config, args.prompt, args.condition, args.seed)
            print(json.dumps(result, indent=2))
        elif args.command == "gen3d-coarse":
            out = cmd_gen3d_coarse(config, args.prompt, args.condition, args.seed)
            print(f"surface checkpoint written to {out}")
        elif args.command == "gen3d-fine":
            result = cmd_gen3d_fine(config, args.seed)
            print(json.dumps(result, indent=2))
        elif args.command == "ablate-pose":
            report = cmd_ablate_pose(config, args.seed)
            print(json.dumps(report, indent=2))
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
