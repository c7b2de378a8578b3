"""Command-line harness: gen-data, train, eval, ablate, gradcheck.

The IFWM_THREADS environment variable caps evaluation sharding;
--deterministic pins it to 1.  Training itself is bit-deterministic for a
fixed config regardless.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

import numpy as np

from ifwm import checkpoint, gradcheck
from ifwm.backbone import VARIANT_NAMES, build_network
from ifwm.config import TrainConfig, load_config
from ifwm.data import SceneSpec, generate_dataset
from ifwm.errors import IfwmError
from ifwm.metrics import write_scores_csv
from ifwm.train import (
    evaluate,
    load_dataset,
    predict_raster,
    run_ablation,
    split_dataset,
    train,
)


def _add_common(p: argparse.ArgumentParser, variant: bool = True) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="pin evaluation to a single thread")
    if variant:
        p.add_argument("--variant", choices=VARIANT_NAMES,
                       help="override the fusion variant")


def _config_from(args) -> TrainConfig:
    return load_config(args.config, seed=args.seed,
                       fusion=getattr(args, "variant", None))


def write_pgm(path: str, labels: np.ndarray, num_classes: int) -> None:
    """Class raster as a binary PGM, stretched over the grey range."""
    scale = 255 // max(1, num_classes - 1)
    data = (labels.astype(np.int64) * scale).clip(0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def cmd_gen_data(args) -> int:
    spec = SceneSpec(height=args.scene_size, width=args.scene_size)
    manifest = generate_dataset(args.out, args.scenes, spec, args.seed,
                                tile=args.tile, stride=args.stride)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    result = train(cfg, args.out)
    print(f"trained {result.epochs_run} epochs; "
          f"best mIoU {result.best_miou:.4f} at epoch {result.best_epoch}; "
          f"final PA {result.final.pixel_accuracy:.4f} mIoU {result.final.miou:.4f}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    samples = load_dataset(cfg.data_manifest)
    if args.split == "val":
        _, samples = split_dataset(samples, cfg.val_fraction)
    elif args.split == "train":
        samples, _ = split_dataset(samples, cfg.val_fraction)
    if not samples:
        print("error: nothing to evaluate", file=sys.stderr)
        return 2

    net = build_network(cfg.network_spec())
    if args.checkpoint:
        checkpoint.apply_state(net.registry, checkpoint.load_state(args.checkpoint),
                               path=args.checkpoint)
    cm = evaluate(net, samples, cfg.num_classes, cfg.tile, oracle=args.oracle)
    os.makedirs(args.out, exist_ok=True)
    scores_path = os.path.join(args.out, "scores.csv")
    write_scores_csv(cm, scores_path)
    if args.dump:
        os.makedirs(args.dump, exist_ok=True)
        for i, s in enumerate(samples):
            pred = (s.labels.astype(np.int64) if args.oracle
                    else predict_raster(net, s.image, cfg.tile))
            write_pgm(os.path.join(args.dump, f"pred_{i:04d}.pgm"), pred, cfg.num_classes)
    summ = cm.summary()
    print(f"PA {summ.pixel_accuracy:.4f} mIoU {summ.miou:.4f} mF1 {summ.mf1:.4f}")
    print(f"scores: {scores_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in VARIANT_NAMES:
            print(f"error: unknown method {m!r}", file=sys.stderr)
            return 2
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    run_ablation(cfg, methods, seeds, args.out)
    print(f"wrote {os.path.join(args.out, 'ablation.csv')}")
    return 0


def cmd_gradcheck(args) -> int:
    ops = [o.strip() for o in args.ops.split(",")] if args.ops else None
    results = gradcheck.run_suite(seeds=args.seeds, ops=ops)
    print(gradcheck.format_report(results))
    return 0 if gradcheck.suite_passed(results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifwm",
                                 description="flow-warp fusion segmentation harness")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic tiled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=24)
    p.add_argument("--scene-size", type=int, default=160)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--stride", type=int, default=48)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a network")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint to load (default: fresh init)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (pipeline check)")
    p.add_argument("--dump", help="directory for PGM prediction dumps")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare fusion variants")
    _add_common(p, variant=False)
    p.add_argument("--methods", default="baseline,sf,lsf,rifw,ifwm")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ops", help="comma-separated subset of ops")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False):
        os.environ["IFWM_THREADS"] = "1"
    try:
        return args.fn(args)
    except (IfwmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
