"""Dataset-level scene sampling: draws per-scene object placements from
a dataset spec (a flat key=value file) and materializes datasets on disk
as PGM files plus annotation and split-manifest text files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import (
    Placement,
    SceneSpec,
    generate_scene,
    grounded_bottom,
    object_side,
    parse_keyvalue_file,
    save_pgm,
)
from .labels import Annotation, save_annotations
from .training import TrainImage

__all__ = [
    "DatasetSpec",
    "load_dataset_spec",
    "save_dataset_spec",
    "sample_scene_spec",
    "generate_dataset",
    "write_dataset",
    "split_dataset",
    "grounded_desk_spec",
    "context_free_desk_spec",
]

_PLACEMENT_TRIES = 40
_MARGIN = 2.0


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for sampling many scenes from one distribution."""

    width: int = 128
    height: int = 128
    context_mode: str = "grounded"
    clutter: int = 4
    objects_min: int = 1
    objects_max: int = 2
    scale_choices: tuple = (1.0,)
    scale_weights: tuple = (1.0,)
    seed: int = 0

    def __post_init__(self):
        if len(self.scale_choices) != len(self.scale_weights):
            raise ValueError("scale_choices and scale_weights differ in length")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("invalid objects_min/objects_max range")
        weights = np.asarray(self.scale_weights, dtype=np.float64)
        if weights.sum() <= 0:
            raise ValueError("scale weights must sum to a positive value")
        object.__setattr__(
            self, "scale_weights", tuple(weights / weights.sum())
        )
        object.__setattr__(self, "scale_choices", tuple(self.scale_choices))


def grounded_desk_spec(seed: int = 0) -> DatasetSpec:
    """Small grounded-scene preset: mostly near-base-size objects with a
    tail of larger ones so several scale classes are populated."""
    return DatasetSpec(
        context_mode="grounded",
        scale_choices=(0.875, 0.9375, 1.40625, 2.0, 2.84375),
        scale_weights=(0.45, 0.45, 0.04, 0.03, 0.03),
        seed=seed,
    )


def context_free_desk_spec(seed: int = 0) -> DatasetSpec:
    """Objects at one fixed scale on i.i.d. noise."""
    return DatasetSpec(
        context_mode="context-free",
        scale_choices=(0.9375,),
        scale_weights=(1.0,),
        seed=seed,
    )


def load_dataset_spec(path) -> DatasetSpec:
    values = parse_keyvalue_file(path)

    def floats(key, default):
        raw = values.get(key)
        if raw is None:
            return default
        return tuple(float(v) for v in raw.split(",") if v.strip())

    return DatasetSpec(
        width=int(values.get("width", 128)),
        height=int(values.get("height", 128)),
        context_mode=values.get("context_mode", "grounded"),
        clutter=int(values.get("clutter", 4)),
        objects_min=int(values.get("objects_min", 1)),
        objects_max=int(values.get("objects_max", 2)),
        scale_choices=floats("scale_choices", (1.0,)),
        scale_weights=floats("scale_weights", (1.0,)),
        seed=int(values.get("seed", 0)),
    )


def save_dataset_spec(spec: DatasetSpec, path):
    with open(path, "w") as fh:
        fh.write(f"width={spec.width}\n")
        fh.write(f"height={spec.height}\n")
        fh.write(f"context_mode={spec.context_mode}\n")
        fh.write(f"clutter={spec.clutter}\n")
        fh.write(f"objects_min={spec.objects_min}\n")
        fh.write(f"objects_max={spec.objects_max}\n")
        fh.write("scale_choices=" + ",".join(f"{v:g}" for v in spec.scale_choices) + "\n")
        fh.write("scale_weights=" + ",".join(f"{v:g}" for v in spec.scale_weights) + "\n")
        fh.write(f"seed={spec.seed}\n")


def _box_fits(spec, cx, cy, side):
    x1 = cx - side / 2.0
    y1 = cy - side / 2.0
    return (
        x1 >= 0 and y1 >= 0
        and x1 + side <= spec.width and y1 + side <= spec.height
    )


def _too_close(cx, cy, side, placed):
    for px, py, pside in placed:
        gap = (side + pside) / 2.0
        if abs(cx - px) < gap and abs(cy - py) < gap:
            return True
    return False


def sample_scene_spec(spec: DatasetSpec, index: int) -> SceneSpec:
    """Scene spec for one dataset index; deterministic per (spec, index)."""
    rng = np.random.default_rng((spec.seed, index, 7))
    count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    placed = []
    placements = []
    for _ in range(count):
        for _ in range(_PLACEMENT_TRIES):
            scale = float(rng.choice(spec.scale_choices, p=spec.scale_weights))
            side = object_side(scale)
            cx = float(rng.uniform(side / 2.0 + _MARGIN, spec.width - side / 2.0 - _MARGIN))
            if spec.context_mode == "grounded":
                cy = grounded_bottom(spec.height, side) - side / 2.0
            else:
                cy = float(
                    rng.uniform(side / 2.0 + _MARGIN, spec.height - side / 2.0 - _MARGIN)
                )
            if not _box_fits(spec, cx, cy, side):
                continue
            if _too_close(cx, cy, side, placed):
                continue
            placed.append((cx, cy, side))
            placements.append(Placement(cx=cx, cy=cy, scale=scale))
            break
    scene_seed = int(np.random.SeedSequence((spec.seed, index)).generate_state(1)[0])
    return SceneSpec(
        width=spec.width,
        height=spec.height,
        placements=tuple(placements),
        context_mode=spec.context_mode,
        clutter=spec.clutter,
        seed=scene_seed,
    )


def generate_dataset(spec: DatasetSpec, count: int, name_format="scene_{:04d}"):
    """Render ``count`` scenes in memory as TrainImage records."""
    records = []
    for index in range(count):
        scene = sample_scene_spec(spec, index)
        img, boxes = generate_scene(scene)
        records.append(
            TrainImage(image_id=name_format.format(index), source=img, boxes=boxes)
        )
    return records


def split_dataset(records, seed, train_fraction=0.7):
    """Deterministic 70/30 shuffle split; returns (train, test) lists."""
    rng = np.random.default_rng((seed, 999))
    order = rng.permutation(len(records))
    cut = int(round(len(records) * train_fraction))
    train = [records[i] for i in order[:cut]]
    test = [records[i] for i in order[cut:]]
    return train, test


def write_dataset(spec: DatasetSpec, count: int, out_dir):
    """Materialize a dataset: PGM scenes, an annotation file, and 70/30
    train/test split manifests.  Returns the record list."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    records = generate_dataset(spec, count)
    annotations = []
    for rec in records:
        filename = f"{rec.image_id}.pgm"
        save_pgm(rec.source, os.path.join(out_dir, filename))
        annotations.extend(
            Annotation(image_path=filename, box=b, class_id=0) for b in rec.boxes
        )
    save_annotations(annotations, os.path.join(out_dir, "annotations.txt"))

    train, test = split_dataset(records, spec.seed)
    for name, subset in (("train.txt", train), ("test.txt", test)):
        with open(os.path.join(out_dir, name), "w") as fh:
            for rec in subset:
                fh.write(f"{rec.image_id}.pgm\n")
    save_dataset_spec(spec, os.path.join(out_dir, "dataset.spec"))
    return records
