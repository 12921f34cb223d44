"""Command-line entry point.

Subcommands mirror the experiment pipeline:

    koopman-mppi collect --config cfg.yaml [--seed N] [--out DIR]
    koopman-mppi train   --config cfg.yaml --dataset data.csv [--seed N] [--out DIR]
    koopman-mppi run     --config cfg.yaml [--model model.npz] [--backend dk|true|relift]
    koopman-mppi bench   --config cfg.yaml --model model.npz [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 controller failure. Worker threads for rollout evaluation come from the
KOOPMAN_MPPI_WORKERS environment variable (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import cmd_bench, cmd_collect, cmd_run, cmd_train, load_config
from .koopman import TrainingError
from .mppi import ControllerError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_CONTROLLER = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config (YAML)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopman-mppi",
                                     description="Koopman-surrogate MPPI experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect a uniform-random transition dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train the Koopman surrogate on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="dataset file from `collect`")

    p = sub.add_parser("run", help="run closed-loop evaluation episodes")
    _add_common(p)
    p.add_argument("--model", default=None, help="trained model file (required for dk/relift)")
    p.add_argument("--backend", default="dk", choices=["dk", "true", "relift"])

    p = sub.add_parser("bench", help="benchmark per-step compute time of all backends")
    _add_common(p)
    p.add_argument("--model", required=True, help="trained model file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "collect":
            path = cmd_collect(cfg, out=args.out, seed=args.seed)
            print(f"wrote {path}")
        elif args.command == "train":
            path = cmd_train(cfg, args.dataset, out=args.out, seed=args.seed)
            print(f"wrote {path}")
        elif args.command == "run":
            payload = cmd_run(cfg, model_path=args.model, backend=args.backend,
                              out=args.out, seed=args.seed)
            print(json.dumps(payload["summary"], indent=2))
        elif args.command == "bench":
            report = cmd_bench(cfg, args.model, out=args.out)
            print(json.dumps(report, indent=2))
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ControllerError as exc:
        print(f"controller failed: {exc}", file=sys.stderr)
        return EXIT_CONTROLLER
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
