"""Command-line entry point: ``sgad simulate|evaluate|sweep|rate --config FILE``."""

import argparse
import logging
import sys

import yaml

from .errors import RejectedInputError, TrainingDivergedError, UndefinedMetricError
from .experiments import COMMANDS, ExperimentConfig

logger = logging.getLogger("sgad")

EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sgad",
        description="Score-guided autoencoder experiments for unsupervised anomaly detection.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "synthetic data, per-epoch score differences per field",
        "evaluate": "preprocess, split, train and score; mean/std over runs",
        "sweep": "two-parameter grid of evaluate runs (heatmap.csv)",
        "rate": "AUC-ROC versus training anomaly rate (rates.csv)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="base seed (overrides schedule.seed)")
        p.add_argument("--runs", type=int, help="number of runs (overrides schedule.n_runs)")
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = ExperimentConfig.load(args.config).with_overrides(args.out, args.seed, args.runs)
        if args.no_plots:
            cfg.output.plots = False
        if args.seed is not None and args.seed < 0:
            raise RejectedInputError("--seed must be non-negative")
        artifact = COMMANDS[args.command](cfg)
    except (RejectedInputError, UndefinedMetricError, FileNotFoundError, yaml.YAMLError, TypeError) as exc:
        print(f"sgad {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"sgad {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if artifact.aggregate:
        for key, stats in artifact.aggregate.items():
            print(f"{key}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
    print(f"artifacts written to {artifact.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
