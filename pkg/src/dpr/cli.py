"""Command-line entry point.

Subcommands mirror the pipeline stages: generate-data, train-selector,
train-refiner, infer, evaluate, sweep. Exit codes: 0 success, 2 configuration
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .pipeline import ConfigError

STAGES = ("generate-data", "train-selector", "train-refiner", "infer", "evaluate", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpr",
        description="Selective patch refinement: classify patches, diffusion-refine the "
                    "object-bearing ones, interpolate the rest, reassemble, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="override the output directory")
        if name == "evaluate":
            p.add_argument("--detections", type=str, required=True,
                           help="detections JSONL file to score")
        if name in ("infer", "evaluate", "sweep"):
            p.add_argument("--split", type=str, default="val", choices=("train", "val"))
        if name == "sweep":
            p.add_argument("--taus", type=float, nargs="*", default=None,
                           help="thresholds to sweep (default: config sweep_taus)")
    return parser


def _config_from_args(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return pipeline.load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "generate-data":
            manifest = pipeline.run_generate_data(cfg)
            print(f"wrote {len(manifest)} samples to {cfg['dataset_dir']}")
        elif args.command == "train-selector":
            path = pipeline.run_train(cfg, "selector")
            print(f"selector checkpoint: {path}")
        elif args.command == "train-refiner":
            path = pipeline.run_train(cfg, "refiner")
            print(f"refiner checkpoint: {path}")
        elif args.command == "infer":
            result = pipeline.run_infer(cfg, split=args.split)
            print(f"report: {cfg['out_dir']}/report.json "
                  f"(mAP {result.report['map']:.4f}, "
                  f"refined fraction {result.report['refined_patch_fraction']:.3f})")
        elif args.command == "evaluate":
            doc = pipeline.run_evaluate(cfg, args.detections, split=args.split)
            print(f"mAP {doc['map']:.4f} mAP50 {doc['map50']:.4f} "
                  f"TPR {doc['tpr']:.4f} precision {doc['precision']:.4f}")
        elif args.command == "sweep":
            sweep = pipeline.run_sweep(cfg, taus=args.taus, split=args.split)
            print(f"sweep rows: {len(sweep.rows)}; results in {cfg['out_dir']}/sweep.csv")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit codes
        logging.getLogger("dpr").exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
