"""Command-line driver: reconstruct, evaluate, ablate."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import RayfusionError
from .metrics import compute_metrics, sample_mesh, write_metrics
from .pipeline import (
    PipelineConfig,
    ablation_report,
    load_config,
    reference_surface_points,
    run_pipeline,
)
from .synth import builtin_scene, load_scene_file


def _add_reconstruct(sub):
    p = sub.add_parser("reconstruct", help="run the full pipeline on a scene or dataset")
    p.add_argument("--config", help="flat key=value config file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene description file or builtin name")
    src.add_argument("--dataset", help="dataset directory (poses.txt layout)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--strategy", choices=["sliding_window", "topk", "threshold"])
    p.add_argument("--predictor", choices=["oracle", "heuristic", "external"])
    p.add_argument("--head", choices=["oracle", "heuristic", "external"])
    p.add_argument("--seed", type=int)
    return p


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="compare a predicted mesh against ground truth")
    p.add_argument("--pred", required=True, help="predicted mesh (.ply)")
    p.add_argument("--gt", required=True,
                   help="ground-truth mesh (.ply) or scene file / builtin name")
    p.add_argument("--threshold-cm", type=float, default=5.0)
    p.add_argument("--out", help="write metrics JSON here (default: stdout)")
    return p


def _add_ablate(sub):
    p = sub.add_parser("ablate", help="run several configs and emit a CSV report")
    p.add_argument("--configs", required=True, help="directory of *.cfg files")
    p.add_argument("--scene", required=True, help="scene file or builtin name")
    p.add_argument("--out", default="ablation.csv")
    return p


def _resolve_scene(name_or_path: str):
    if os.path.isfile(name_or_path):
        return load_scene_file(name_or_path)
    return builtin_scene(name_or_path)


def _cmd_reconstruct(args) -> int:
    overrides = {}
    for key in ("strategy", "predictor", "head", "seed"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = PipelineConfig(**overrides)
        cfg.validate()
    bundle = _resolve_scene(args.scene) if args.scene else None
    out = run_pipeline(cfg, args.out, scene_bundle=bundle, dataset_dir=args.dataset)
    print(f"mesh:    {out['mesh']}")
    print(f"log:     {out['log']}")
    if "metrics" in out:
        print(f"metrics: {out['metrics']}")
        print(f"chamfer: {out['chamfer_cm']:.3f} cm  f-score: {out['fscore']:.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    from .mesh import read_ply

    pred = sample_mesh(read_ply(args.pred))
    if args.gt.endswith(".ply"):
        gt = sample_mesh(read_ply(args.gt))
    else:
        bundle = _resolve_scene(args.gt)
        gt = reference_surface_points(bundle, PipelineConfig())
    metrics = compute_metrics(pred, gt, threshold_cm=args.threshold_cm)
    if args.out:
        write_metrics(metrics, args.out)
        print(f"metrics written to {args.out}")
    else:
        print(metrics.to_json())
    return 0


def _cmd_ablate(args) -> int:
    cfg_files = sorted(
        os.path.join(args.configs, f)
        for f in os.listdir(args.configs)
        if f.endswith(".cfg")
    )
    if not cfg_files:
        print(f"no .cfg files in {args.configs!r}", file=sys.stderr)
        return 1
    runs = [(os.path.splitext(os.path.basename(f))[0], load_config(f))
            for f in cfg_files]
    bundle = _resolve_scene(args.scene)
    ablation_report(runs, args.out, bundle)
    print(f"report written to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="rayfusion",
        description="incremental visibility-aware volumetric reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_reconstruct(sub)
    _add_evaluate(sub)
    _add_ablate(sub)
    args = parser.parse_args(argv)
    try:
        if args.command == "reconstruct":
            return _cmd_reconstruct(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        return _cmd_ablate(args)
    except (RayfusionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
