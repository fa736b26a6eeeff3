"""Command-line entry point tying the pipeline together.

Subcommands:

* ``synth``    -- sample a synthetic dataset onto disk,
* ``train``    -- train a detector family with hard-negative mining,
* ``detect``   -- run a trained model on an image or an MSSFP pyramid,
* ``eval``     -- score a detections file against annotations,
* ``analyze``  -- weight-mass report and template heatmaps for a model,
* ``pyramid``  -- build a feature pyramid from an image and export it.

Every subcommand is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .detect import detect_image, save_detections
from .evaluate import (
    average_precision,
    save_pr_csv,
    save_weight_report_csv,
    template_heatmap,
    weight_analysis,
)
from .features import build_pyramid, export_pyramid, import_pyramid
from .imaging import load_image, save_pgm
from .labels import boxes_by_image, load_annotations
from .learning import TrainConfig, load_model, save_model
from .synth import load_dataset_spec, write_dataset
from .training import FAMILY_CHOICES, TrainImage, train_detector

log = logging.getLogger(__name__)

_DESK_PRESET = {"init_negatives": 500, "round_cap": 500}


def _add_train_flags(p):
    p.add_argument("--family", choices=FAMILY_CHOICES, default="mss-ova")
    p.add_argument("--levels", type=int, default=10,
                   help="pyramid level count (default 10)")
    p.add_argument("--cell-size", type=int, default=8)
    p.add_argument("--padding", choices=("zero", "replicate"), default=None,
                   help="override the family's default padding")
    p.add_argument("--c", type=float, default=0.01, help="SVM C")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--virtual", type=int, default=0,
                   help="virtual positive copies per image (up to 5)")
    p.add_argument("--rounds", type=int, default=None,
                   help="mining rounds cap (default 5, or 1 for imported features)")
    p.add_argument("--init-negatives", type=int, default=None)
    p.add_argument("--round-cap", type=int, default=None)
    p.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="desk shrinks the negative pools for quick runs")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mssdet",
        description="Multi-scale structure detector: synthesis, training, "
                    "detection, evaluation, and model analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic dataset to disk")
    p.add_argument("--spec", required=True, help="dataset spec (key=value file)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")

    p = sub.add_parser("train", help="train a detector with mining")
    p.add_argument("--data", required=True,
                   help="dataset directory (annotations.txt + train.txt)")
    p.add_argument("--split", default="train.txt")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)

    p = sub.add_parser("detect", help="detect objects in one image or pyramid")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="PGM/PPM image or MSSFP pyramid")
    p.add_argument("--image-id", default=None,
                   help="id written in the output (default: input basename)")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--nms", type=float, default=0.5)
    p.add_argument("--out", default=None, help="detections file (default stdout)")

    p = sub.add_parser("eval", help="PR curve and AP for a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--continuous", action="store_true",
                   help="exact PR integration instead of 11-point AP")
    p.add_argument("--out", default=None, help="PR CSV path")

    p = sub.add_parser("analyze", help="weight report and template heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pyramid", help="build and export an MSSFP pyramid")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--cell-size", type=int, default=8)
    p.add_argument("--padding", choices=("zero", "replicate"), default="zero")
    p.add_argument("--out", required=True)
    return parser


def _load_source(path):
    if path.endswith(".mssfp"):
        return import_pyramid(path)
    return load_image(path)


def _load_dataset(data_dir, split):
    annotations = load_annotations(os.path.join(data_dir, "annotations.txt"))
    grouped = boxes_by_image(annotations)
    manifest = os.path.join(data_dir, split)
    records = []
    imported = False
    with open(manifest) as fh:
        for line in fh:
            name = line.strip()
            if not name or name.startswith("#"):
                continue
            source = _load_source(os.path.join(data_dir, name))
            imported = imported or name.endswith(".mssfp")
            records.append(
                TrainImage(image_id=name, source=source, boxes=grouped.get(name, ()))
            )
    if not records:
        raise ValueError(f"manifest {manifest} lists no images")
    return records, imported


def cmd_synth(args):
    spec = load_dataset_spec(args.spec)
    if args.seed is not None:
        import dataclasses

        spec = dataclasses.replace(spec, seed=args.seed)
    records = write_dataset(spec, args.count, args.out)
    boxes = sum(len(r.boxes) for r in records)
    print(f"wrote {len(records)} scenes with {boxes} objects to {args.out}")
    return 0


def cmd_train(args):
    records, imported = _load_dataset(args.data, args.split)
    preset = _DESK_PRESET if args.preset == "desk" else {}
    config = TrainConfig(
        C=args.c,
        mining_rounds=(
            args.rounds if args.rounds is not None else (1 if imported else 5)
        ),
        initial_negatives=(
            args.init_negatives if args.init_negatives is not None
            else preset.get("init_negatives", 5000)
        ),
        round_cap=(
            args.round_cap if args.round_cap is not None
            else preset.get("round_cap", 5000)
        ),
        seed=args.seed,
    )
    result = train_detector(
        records,
        family=args.family,
        config=config,
        levels=args.levels,
        cell_size=args.cell_size,
        padding=args.padding,
        virtual_count=args.virtual,
    )

    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.mssm")
    save_model(result.model, model_path)
    log_path = os.path.join(args.out, "mining_log.csv")
    with open(log_path, "w") as fh:
        fh.write("round,pool_size,additions,train_ap\n")
        for row in result.log_rows:
            fh.write(f"{row[0]},{row[1]},{row[2]},{row[3]:.4f}\n")
    final_ap = result.log_rows[-1][3]
    print(
        f"trained {args.family} on {result.positives} positives "
        f"({result.skipped_positives} skipped), pool {result.state.pool_size}, "
        f"train AP {final_ap:.4f}"
    )
    print(f"model: {model_path}")
    print(f"mining log: {log_path}")
    return 0


def cmd_detect(args):
    model = load_model(args.model)
    source = _load_source(args.input)
    detections = detect_image(source, model, args.threshold, args.nms)
    image_id = args.image_id or os.path.basename(args.input)
    entries = [(image_id, d) for d in detections]
    if args.out:
        save_detections(entries, args.out)
        print(f"{len(entries)} detections -> {args.out}")
    else:
        for image_id, det in entries:
            b = det.box
            print(
                f"{image_id} {det.score:.9g} {b.x1:.9g} {b.y1:.9g} "
                f"{b.x2:.9g} {b.y2:.9g} {det.scale_index}"
            )
    return 0


def cmd_eval(args):
    from .detect import load_detections

    entries = load_detections(args.detections)
    annotations = load_annotations(args.annotations)
    gt = boxes_by_image(annotations)
    curve = average_precision(
        entries, gt, args.overlap,
        method="continuous" if args.continuous else "11point",
    )
    if args.out:
        save_pr_csv(curve, args.out)
    print(f"AP {curve.ap:.4f}")
    return 0


def cmd_analyze(args):
    model = load_model(args.model)
    os.makedirs(args.out, exist_ok=True)
    report = weight_analysis(model)
    save_weight_report_csv(report, os.path.join(args.out, "weight_report.csv"))
    for k in range(model.K):
        if not model.weights[k].any():
            continue
        for s, img in enumerate(template_heatmap(model, k)):
            save_pgm(img, os.path.join(args.out, f"class{k}_level{s}.pgm"))
    print(
        f"mean out-of-scale positive fraction "
        f"{report.mean_out_scale_positive:.4f} "
        f"({report.excluded_classes} empty classes excluded)"
    )
    print(f"report and heatmaps in {args.out}")
    return 0


def cmd_pyramid(args):
    img = load_image(args.input)
    pyr = build_pyramid(img, args.levels, args.cell_size, args.padding)
    if pyr.truncated:
        log.warning("pyramid truncated to %d of %d levels", pyr.S, args.levels)
    export_pyramid(pyr, args.out)
    print(f"{pyr.S} levels, {pyr.d} channels -> {args.out}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "pyramid": cmd_pyramid,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
