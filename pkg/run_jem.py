#!/usr/bin/env python3
"""
Command-line entry point for the JEM laboratory.

Subcommands: train, sample, eval, ood, attack, distal.
"""

import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from jem_lab.commands import cmd_attack, cmd_distal, cmd_eval, cmd_ood, cmd_sample, cmd_train
from jem_lab.config import env_threads
from jem_lab.evaluation import SCORE_NAMES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train a classifier as a joint energy-based model and evaluate it.",
        formatter_class=argparse.RawTextHelpFormatter
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging.")
    parser.add_argument("--threads", type=int, default=None,
                        help="Worker threads for attacks and scoring (default: $JEM_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Run joint training")
    train.add_argument("--config", required=True, help="Path to the key = value run configuration")
    train.add_argument("--out", required=True, help="Output directory")
    train.add_argument("--resume", action="store_true", help="Continue from <out>/checkpoints/last.jemc")
    train.add_argument("--seed", type=int, default=None, help="Override the config seed")

    sample = sub.add_parser("sample", help="Draw samples from a trained model")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--out", required=True)
    sample.add_argument("--method", type=int, choices=(1, 2), default=2,
                        help="1: draw y then follow f(x)[y]; 2: follow log p(x)")
    sample.add_argument("--n", type=int, default=100)
    sample.add_argument("--steps", type=int, default=100)
    sample.add_argument("--keep-top", type=float, default=None,
                        help="Keep this fraction of samples with the highest max p(y|x)")
    sample.add_argument("--source", choices=("chains", "buffer"), default="chains")
    sample.add_argument("--seed", type=int, default=None)

    evaluate = sub.add_parser("eval", help="Accuracy and calibration on a dataset")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", required=True, help="CSV or JTB dataset in raw coordinates")
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--bins", type=int, default=20)

    ood = sub.add_parser("ood", help="Out-of-distribution scores and AUROC")
    ood.add_argument("--checkpoint", required=True)
    ood.add_argument("--data", required=True, help="In-distribution dataset")
    ood.add_argument("--ood", nargs="*", default=[], help="OOD dataset files")
    ood.add_argument("--scores", nargs="+", choices=SCORE_NAMES, default=list(SCORE_NAMES))
    ood.add_argument("--no-reference", action="store_true", help="Skip the constant and uniform sets")
    ood.add_argument("--out", required=True)
    ood.add_argument("--seed", type=int, default=None)

    attack = sub.add_parser("attack", help="Robustness curves, pointwise and transfer attacks")
    attack.add_argument("--checkpoint", required=True)
    attack.add_argument("--data", required=True, help="Dataset to draw attacked inputs from")
    attack.add_argument("--config", default=None, help="Run configuration with the attack.* plan")
    attack.add_argument("--out", required=True)
    attack.add_argument("--no-pointwise", action="store_true")
    attack.add_argument("--seed", type=int, default=None)

    distal = sub.add_parser("distal", help="Grow confident inputs from noise")
    distal.add_argument("--checkpoint", required=True)
    distal.add_argument("--target", type=int, required=True)
    distal.add_argument("--out", required=True)
    distal.add_argument("--n", type=int, default=10)
    distal.add_argument("--conf-target", type=float, default=0.9)
    distal.add_argument("--max-iters", type=int, default=200)
    distal.add_argument("--seed", type=int, default=None)
    return parser


def run(args: argparse.Namespace) -> int:
    threads = args.threads if args.threads is not None else env_threads()
    if args.command == "train":
        return cmd_train(args.config, args.out, resume=args.resume, seed=args.seed)
    if args.command == "sample":
        return cmd_sample(args.checkpoint, args.out, method=args.method, n=args.n, steps=args.steps,
                          seed=args.seed, keep_top=args.keep_top, source=args.source)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.out, bins=args.bins)
    if args.command == "ood":
        return cmd_ood(args.checkpoint, args.data, args.out, ood_datasets=args.ood, scores=args.scores,
                       include_reference=not args.no_reference, seed=args.seed, threads=threads)
    if args.command == "attack":
        return cmd_attack(args.checkpoint, args.data, args.out, config_path=args.config, seed=args.seed,
                          threads=threads, pointwise=not args.no_pointwise)
    return cmd_distal(args.checkpoint, args.target, args.out, n=args.n, conf_target=args.conf_target,
                      max_iters=args.max_iters, seed=args.seed)


def main(argv=None) -> int:
    """Main entry point with command-line argument parsing."""
    load_dotenv()
    args = build_parser().parse_args(argv)

    # Configure logging
    default_level = os.getenv("JEM_LOG_LEVEL", "INFO").upper()
    log_level = logging.DEBUG if args.verbose else getattr(logging, default_level, logging.INFO)
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
