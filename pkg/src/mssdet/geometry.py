"""Boxes, overlap, cross-scale coordinate mapping, and non-maximum
suppression.  All coordinates use an inclusive-exclusive pixel convention,
so area = (x2 - x1) * (y2 - y1) with no +1 corrections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "Detection",
    "PyramidLocation",
    "overlap",
    "map_location",
    "box_for_scale",
    "nms",
]


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)


@dataclass(frozen=True)
class PyramidLocation:
    """Cell-grid window anchor (x, y) in pyramid level s.  The anchored
    window may extend past the feature map; padding resolves such reads."""

    x: int
    y: int
    s: int


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    scale_index: int
    class_id: int = 0

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


def overlap(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def overlap_many(box: Box, xs1, ys1, xs2, ys2):
    """IoU of one box against parallel coordinate arrays."""
    iw = np.minimum(box.x2, xs2) - np.maximum(box.x1, xs1)
    ih = np.minimum(box.y2, ys2) - np.maximum(box.y1, ys1)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box.area + (xs2 - xs1) * (ys2 - ys1) - inter
    return inter / union


def map_location(scales, cell_stride, center, s, template_dims) -> PyramidLocation:
    """Anchor of a template-sized window in level ``s`` whose window is
    centered (to the nearest cell, ties to even) on an image-space point.

    ``scales`` is the per-level scale array, ``center`` an (x, y) point in
    original-image pixels, ``template_dims`` the (tw, th) template size in
    cells.  The anchor may fall outside the feature map.
    """
    tw, th = template_dims
    cx, cy = (cell_stride, cell_stride) if np.isscalar(cell_stride) else cell_stride
    sx = center[0] * scales[s] / cx - tw / 2.0
    sy = center[1] * scales[s] / cy - th / 2.0
    return PyramidLocation(x=int(np.round(sx)), y=int(np.round(sy)), s=int(s))


def box_for_scale(template_dims, center, s, scales, cell_stride) -> Box:
    """Image-space box of a template-sized window at level ``s`` centered
    on a point.  Coarser levels yield proportionally larger boxes."""
    tw, th = template_dims
    cx, cy = (cell_stride, cell_stride) if np.isscalar(cell_stride) else cell_stride
    w = tw * cx / scales[s]
    h = th * cy / scales[s]
    return Box(
        x1=center[0] - w / 2.0,
        y1=center[1] - h / 2.0,
        x2=center[0] + w / 2.0,
        y2=center[1] + h / 2.0,
    )


def nms(detections, threshold: float):
    """Greedy non-maximum suppression.

    Detections are visited in order of descending score (ties broken by
    box x1, then y1, so the result is stable); one is kept iff its overlap
    with every already-kept detection is below the threshold.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"nms threshold must be in [0, 1], got {threshold}")
    order = sorted(detections, key=lambda d: (-d.score, d.box.x1, d.box.y1))
    kept = []
    for det in order:
        if all(overlap(det.box, k.box) < threshold for k in kept):
            kept.append(det)
    return kept
