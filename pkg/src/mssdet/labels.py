"""Scale-label construction for training samples.

A positive sample's scale label is built by sliding the fixed model box
across pyramid levels at the sample's center: the per-level overlap with
the ground truth forms a profile, and levels that are profile peaks with
overlap of at least 0.6 become the sample's active scale classes.
Objects that reach 0.6 at no level are excluded from the positive set.

Also provides virtual positives (resized copies of a training image that
shift each object's best-fit level) and the plain-text annotation format
``image_path x1 y1 x2 y2 class_id``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeaturePyramid, read_multiscale
from .geometry import Box, box_for_scale, overlap
from .imaging import Image, resize

__all__ = [
    "PEAK_OVERLAP",
    "SampleLabel",
    "TrainingSample",
    "Annotation",
    "model_dims",
    "overlap_profile",
    "threshold_profile",
    "best_fit_level",
    "extract_positives",
    "virtual_positives",
    "VIRTUAL_LEVEL_SHIFTS",
    "load_annotations",
    "save_annotations",
    "boxes_by_image",
]

# Minimum overlap for a profile peak to become an active scale label.
PEAK_OVERLAP = 0.6

# Level shifts used for virtual positives, applied in this order.
VIRTUAL_LEVEL_SHIFTS = (-2, -1, 1, 2, 3)

_MIN_TEMPLATE_CELLS = 3


@dataclass(frozen=True)
class SampleLabel:
    """(class sign, box, per-scale binary labels).  Negative samples have
    no box and an all-zero scale vector; positives have at least one
    active scale."""

    class_sign: int
    box: Box | None
    scale_labels: np.ndarray

    def __post_init__(self):
        if self.class_sign not in (-1, 1):
            raise ValueError(f"class sign must be +-1, got {self.class_sign}")
        labels = np.ascontiguousarray(self.scale_labels, dtype=np.int8)
        if self.class_sign == -1 and labels.any():
            raise ValueError("negative samples must have all-zero scale labels")
        if self.class_sign == 1 and not labels.any():
            raise ValueError("positive samples need at least one active scale")
        labels.flags.writeable = False
        object.__setattr__(self, "scale_labels", labels)


@dataclass(frozen=True)
class TrainingSample:
    """Stacked multi-scale descriptor plus its label and provenance
    (image id, center point, and one of original/virtual/mined/random)."""

    descriptor: np.ndarray
    label: SampleLabel
    source: tuple

    def __post_init__(self):
        desc = np.ascontiguousarray(self.descriptor, dtype=np.float64)
        if not np.all(np.isfinite(desc)):
            raise ValueError("descriptor contains non-finite values")
        desc.flags.writeable = False
        object.__setattr__(self, "descriptor", desc)


def model_dims(boxes, cell_stride) -> tuple:
    """Template size in cells: the mean box size divided by the cell
    stride, rounded, and clamped to at least 3 cells per side."""
    if not boxes:
        raise ValueError("model dimensions need at least one positive box")
    widths = np.array([b.x2 - b.x1 for b in boxes], dtype=np.float64)
    heights = np.array([b.y2 - b.y1 for b in boxes], dtype=np.float64)
    cx, cy = (cell_stride, cell_stride) if np.isscalar(cell_stride) else cell_stride
    tw = max(_MIN_TEMPLATE_CELLS, int(np.round(widths.mean() / cx)))
    th = max(_MIN_TEMPLATE_CELLS, int(np.round(heights.mean() / cy)))
    return tw, th


def overlap_profile(gt_boxes, center, template_dims, scales, cell_stride) -> np.ndarray:
    """Per-level overlap between the model box centered on a point and
    the best-matching ground-truth box.

    The model box at level s covers template_dims * stride / scale(s)
    image pixels, so coarser levels probe larger object sizes.  Overlap
    is computed in original-image coordinates, which is equivalent to
    comparing the fixed-size box against the ground truth in each
    resampled image.
    """
    if not gt_boxes:
        raise ValueError("overlap profile needs at least one ground-truth box")
    profile = np.empty(len(scales))
    for s in range(len(scales)):
        model_box = box_for_scale(template_dims, center, s, scales, cell_stride)
        profile[s] = max(overlap(model_box, gt) for gt in gt_boxes)
    return profile


def threshold_profile(profile, threshold: float = PEAK_OVERLAP) -> np.ndarray:
    """Binary scale labels: 1 exactly at profile peaks with overlap >=
    threshold.  A peak is a strict local maximum or a plateau bounded by
    strictly smaller values; plateau ties go to the coarser level."""
    profile = np.asarray(profile, dtype=np.float64)
    n = len(profile)
    labels = np.zeros(n, dtype=np.int8)
    start = 0
    while start < n:
        end = start
        while end + 1 < n and profile[end + 1] == profile[start]:
            end += 1
        rises_left = start == 0 or profile[start - 1] < profile[start]
        falls_right = end == n - 1 or profile[end + 1] < profile[end]
        if rises_left and falls_right and profile[start] >= threshold:
            labels[end] = 1
        start = end + 1
    return labels


def best_fit_level(profile) -> int:
    """Level whose model box best matches the object (profile argmax)."""
    return int(np.argmax(profile))


def extract_positives(
    pyr: FeaturePyramid,
    gt_boxes,
    template_dims,
    image_id: str = "",
    provenance: str = "original",
):
    """One training sample per ground-truth object with a nonzero scale
    label; returns (samples, skipped_count).  The descriptor stacks
    template windows from every level at the object's center."""
    samples = []
    skipped = 0
    for gt in gt_boxes:
        center = gt.center
        profile = overlap_profile(
            gt_boxes, center, template_dims, pyr.scales, pyr.cell_stride
        )
        scale_labels = threshold_profile(profile)
        if not scale_labels.any():
            skipped += 1
            continue
        descriptor = read_multiscale(pyr, center, template_dims)
        label = SampleLabel(class_sign=1, box=gt, scale_labels=scale_labels)
        samples.append(
            TrainingSample(descriptor=descriptor, label=label,
                           source=(image_id, center, provenance))
        )
    return samples, skipped


def virtual_positives(image: Image, gt_boxes, count: int, min_side: float = 8.0):
    """Resized copies of an image (with rescaled boxes) whose objects'
    best-fit pyramid levels shift by -2, -1, +1, +2, +3.

    A resize factor of 2**(delta/2) shifts every object's best-fit level
    by delta.  Copies that would shrink any object below ``min_side``
    pixels are skipped.
    """
    if count < 0:
        raise ValueError(f"virtual sample count must be >= 0, got {count}")
    copies = []
    for delta in VIRTUAL_LEVEL_SHIFTS[:count]:
        factor = 2.0 ** (delta / 2.0)
        sides = [min(b.x2 - b.x1, b.y2 - b.y1) * factor for b in gt_boxes]
        if any(side < min_side for side in sides):
            continue
        if round(image.width * factor) < 1 or round(image.height * factor) < 1:
            continue
        resized = resize(image, factor)
        scaled_boxes = [
            Box(x1=b.x1 * factor, y1=b.y1 * factor,
                x2=b.x2 * factor, y2=b.y2 * factor)
            for b in gt_boxes
        ]
        copies.append((resized, scaled_boxes))
    return copies


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    image_path: str
    box: Box
    class_id: int = 0


def load_annotations(path):
    """Parse 'image_path x1 y1 x2 y2 class_id' lines; '#' starts a comment."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(
                    f"{path}:{lineno}: expected 6 fields, got {len(parts)}"
                )
            try:
                x1, y1, x2, y2 = (float(v) for v in parts[1:5])
                class_id = int(parts[5])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            records.append(
                Annotation(image_path=parts[0],
                           box=Box(x1=x1, y1=y1, x2=x2, y2=y2),
                           class_id=class_id)
            )
    return records


def save_annotations(records, path):
    with open(path, "w") as fh:
        for rec in records:
            b = rec.box
            fh.write(
                f"{rec.image_path} {b.x1:g} {b.y1:g} {b.x2:g} {b.y2:g} {rec.class_id}\n"
            )


def boxes_by_image(records) -> dict:
    grouped = {}
    for rec in records:
        grouped.setdefault(rec.image_path, []).append(rec.box)
    return grouped
