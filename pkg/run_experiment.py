#!/usr/bin/env python3
"""
IWSGD - run training, gradient checks, bound checks and S comparisons.
"""

import argparse
import sys

from iwsgd.harness import cmd_bounds, cmd_compare, cmd_gradcheck, cmd_train


def parse_args(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(description="Importance-weighted multi-sample training of noisy networks")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="Train one configuration")
    train.add_argument("config", help="Path to the YAML configuration")
    train.add_argument(
        "--workers",
        type=int,
        default=None,
        help="Threads per training step (default: IWSGD_WORKERS or CPU count)"
    )

    gradcheck = subparsers.add_parser("gradcheck", help="Finite-difference check of the gradients")
    gradcheck.add_argument("--seed", type=int, default=0, help="Base seed of the random cases")
    gradcheck.add_argument("--trials", type=int, default=200, help="Number of random cases")
    gradcheck.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)

    bounds = subparsers.add_parser("bounds", help="Exact bound chain of a seeded tiny network")
    bounds.add_argument("config", help="Path to the YAML configuration")

    compare = subparsers.add_parser("compare", help="Matched runs over S values and seeds")
    compare.add_argument("config", help="Path to the YAML configuration")
    compare.add_argument(
        "--workers",
        type=int,
        default=None,
        help="Threads per training step (default: IWSGD_WORKERS or CPU count)"
    )

    return parser.parse_args(argv)


def main(argv=None) -> int:
    """Main entry point."""
    args = parse_args(argv)

    if args.command == "train":
        return cmd_train(args.config, workers=args.workers)
    elif args.command == "gradcheck":
        return cmd_gradcheck(args.seed, args.trials, corrupt=args.corrupt_gradient)
    elif args.command == "bounds":
        return cmd_bounds(args.config)
    elif args.command == "compare":
        return cmd_compare(args.config, workers=args.workers)
    raise ValueError(f"Unknown command: {args.command}")


if __name__ == "__main__":
    sys.exit(main())
