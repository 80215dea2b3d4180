"""Command-line entry point: ``geovoxel <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import InputError, StageError
from .harness.config import load_config
from .harness.pipeline import STAGES, run_pipeline, run_stage

EXIT_CODES = {"config": 2, "synth": 3, "train": 4, "featurize": 5, "encode": 6, "stats": 7,
              "report": 8}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="geovoxel",
        description="Geometry-aware voxel features and voxelwise encoding models.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int,
                        help="worker threads (falls back to $GEOVOXEL_THREADS, then 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate synthetic scenes and render them",
        "train": "contrastive pretraining of the voxel encoder",
        "featurize": "export per-layer feature matrices (and ingest external ones)",
        "encode": "PCA + cross-validated ridge + test metrics per voxel",
        "stats": "ROI aggregation, best layers, paired t-tests, difference maps",
        "report": "write report.csv and report.json",
        "run": "run the full pipeline",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = load_config(args.config, seed=args.seed, out=args.out)
        except InputError as exc:
            raise StageError("config", str(exc)) from exc
        if args.command == "run":
            path = run_pipeline(cfg, args.threads)
            print(path)
        else:
            if args.command not in STAGES:
                raise StageError("config", f"unknown command {args.command}")
            run_stage(args.command, cfg, args.threads)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
