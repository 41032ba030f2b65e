"""Command-line entry point: dataset generation, training, evaluation, plots.

    weathergap generate-data --config cfg.yaml --out runs/data
    weathergap train --config cfg.yaml --data runs/data --out runs/full --mode full
    weathergap eval --checkpoint runs/full/final.ckpt --data runs/data --split target_test
    weathergap plot runs/full runs/source_only --out runs/plots

Commands exit nonzero on failure and never partially overwrite previous
outputs (all file writes go through temp + atomic rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from collections import Counter

from .config import RunConfig, load_run_config
from .corruption import ParameterError
from .evaluator import EvalError, evaluate
from .scenes import ConfigError, atomic_text_write, build_dataset, load_manifest
from .trainer import MODES, TrainingDiverged, train


def _write_snapshot(config: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_text_write(os.path.join(out_dir, "config.yaml"), config.to_yaml())


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_run_config(path)


def cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.master_seed = args.seed
    _write_snapshot(config, args.out)
    manifest_path = build_dataset(
        config.dataset, config.corruption, config.splits.as_dict(), args.out, config.master_seed
    )
    manifest = load_manifest(manifest_path)
    counts = Counter((e["split"], e["domain"]) for e in manifest["images"])
    boxes = Counter(e["split"] for e in manifest["images"])
    print(f"wrote {manifest_path}")
    for (split, domain), n in sorted(counts.items()):
        n_boxes = sum(len(e["boxes"]) for e in manifest["images"] if e["split"] == split)
        print(f"  {split:<13} {domain:<15} images={n:<5} boxes={n_boxes}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.mode is not None:
        config.train = dataclasses.replace(config.train, mode=args.mode)
    if args.seed is not None:
        config.train = dataclasses.replace(config.train, seed=args.seed)
    if args.steps is not None:
        config.train = dataclasses.replace(config.train, steps=args.steps)
    config.validate()
    manifest_path = os.path.join(args.data, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no manifest at {manifest_path}; run generate-data first")
    _write_snapshot(config, args.out)
    result = train(
        config.train,
        config.model,
        manifest_path,
        args.out,
        weather_cfg=config.corruption.weather,
        eval_score_threshold=config.eval.score_threshold,
        eval_nms_iou=config.eval.nms_iou_threshold,
    )
    print(f"final checkpoint: {result['final_checkpoint']}")
    if result["best_checkpoint"]:
        print(f"best checkpoint:  {result['best_checkpoint']}")
    print(f"metrics csv:      {result['metrics_csv']}")
    print(f"best val mAP@0.5: {result['best_val_map']:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest_path = os.path.join(args.data, "manifest.json")
    report = evaluate(args.checkpoint, manifest_path, args.split)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{args.split}.json")
    report.save(out)
    print(f"split: {report.split}  images: {report.counts['n_images']}  "
          f"gt: {report.counts['n_gt']}  detections: {report.counts['n_det']}")
    for class_id, ap in sorted(report.per_class_ap.items()):
        print(f"  class {class_id}: AP@0.5 = {ap:.4f}")
    print(f"  mAP@0.5 = {report.map50:.4f}")
    print(f"report written to {out}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    from .plots import emit_plots

    out_dir = args.out or os.path.join(args.run_dirs[0], "plots")
    written = emit_plots(args.run_dirs, out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weathergap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="generate the synthetic clear/adverse dataset")
    p.add_argument("--config", help="run config YAML (defaults used when omitted)")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, help="override the dataset master seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="run config YAML")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--mode", choices=MODES, help="override the training mode")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--steps", type=int, help="override the step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--split", required=True)
    p.add_argument("--out", help="where to write the report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="emit loss/mAP plots with data sidecar CSVs")
    p.add_argument("run_dirs", nargs="+", help="run directories containing metrics.csv")
    p.add_argument("--out", help="plot output directory (default: first run dir /plots)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
