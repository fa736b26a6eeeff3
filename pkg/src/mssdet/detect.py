"""Sliding-window scoring for the three detector families.

All families slide with a stride of one cell.  The multi-scale detector
scans the original-resolution cell grid once: at each cell it stacks
template windows from every level (mapped through the scale schedule to
stay centered on the same image point), scores all K class templates,
and keeps the best class.  That yields a single score map rather than a
score pyramid, so one location produces at most one detection.

The baseline scans every level independently with one template; the
template pyramid applies K differently-sized templates to the original
level only.  Window reads share one gather kernel, so a multi-scale
model whose weights vanish outside one scale block reproduces the
baseline's scores on that level exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .features import FeaturePyramid, build_pyramid, read_windows
from .geometry import Box, Detection, box_for_scale, nms
from .imaging import Image
from .learning import MssModel, tp_template_dims

__all__ = [
    "ScoreMap",
    "mss_score_grid",
    "score_mss",
    "baseline_level_scores",
    "score_baseline",
    "score_template_pyramid",
    "detect_image",
    "save_detections",
    "load_detections",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreMap:
    """Best class score and winning scale index per original-level cell."""

    cells_wide: int
    cells_high: int
    scores: np.ndarray        # (cells_high, cells_wide)
    argmax_scale: np.ndarray  # (cells_high, cells_wide), int

    def __post_init__(self):
        for name in ("scores", "argmax_scale"):
            arr = getattr(self, name)
            if arr.shape != (self.cells_high, self.cells_wide):
                raise ValueError(f"{name} shape {arr.shape} does not match grid")


def _score_windows(fmap, anchors, template_dims, padding, w, bias=0.0):
    """Score template windows at the given anchors: X @ w + bias."""
    X = read_windows(fmap, anchors, template_dims, padding)
    return X @ w + bias


def _grid_cells(fmap):
    """All (x, y) cell anchors of a feature map, x-fastest."""
    xs, ys = np.meshgrid(np.arange(fmap.cells_wide), np.arange(fmap.cells_high))
    return xs.ravel(), ys.ravel()


def _grid_centers(fmap, template_dims, cell_stride):
    """Image-space centers of template windows anchored at every cell."""
    tw, th = template_dims
    cx, cy = cell_stride
    xs, ys = _grid_cells(fmap)
    return (xs + tw / 2.0) * cx, (ys + th / 2.0) * cy


def _mapped_anchors(centers_x, centers_y, scale, cell_stride, template_dims):
    """Vectorized window anchors for one level, identical to mapping each
    center through the scale schedule with ties-to-even rounding."""
    tw, th = template_dims
    cx, cy = cell_stride
    ax = np.round(centers_x * scale / cx - tw / 2.0).astype(np.intp)
    ay = np.round(centers_y * scale / cy - th / 2.0).astype(np.intp)
    return np.stack([ax, ay], axis=1)


def mss_score_grid(pyr: FeaturePyramid, model: MssModel) -> np.ndarray:
    """Per-class score planes over the original-level cell grid,
    shape (K, cells_high, cells_wide)."""
    model.require_fingerprint(pyr)
    if pyr.padding != "zero":
        raise ValueError("multi-scale scoring requires a zero-padded pyramid")

    base = pyr.levels[0]
    tw, th = model.template_dims
    block = model.block_length
    centers_x, centers_y = _grid_centers(base, model.template_dims, pyr.cell_stride)
    n = centers_x.size

    scores = np.zeros((model.K, n))
    for s in range(pyr.S):
        anchors = _mapped_anchors(
            centers_x, centers_y, pyr.scales[s], pyr.cell_stride, model.template_dims
        )
        X = read_windows(pyr.levels[s], anchors, model.template_dims, pyr.padding)
        for k in range(model.K):
            scores[k] += X @ model.weights[k][s * block : (s + 1) * block]
    scores += model.biases[:, None]
    return scores.reshape(model.K, base.cells_high, base.cells_wide)


def score_mss(
    pyr: FeaturePyramid,
    model: MssModel,
    score_threshold: float = 0.0,
    nms_threshold: float = 0.5,
):
    """Score the stacked multi-scale descriptor at every original-level
    cell; returns (ScoreMap, detections after NMS, sorted by score)."""
    grids = mss_score_grid(pyr, model)
    best = grids.max(axis=0)
    argmax = grids.argmax(axis=0)
    base = pyr.levels[0]
    smap = ScoreMap(
        cells_wide=base.cells_wide,
        cells_high=base.cells_high,
        scores=best,
        argmax_scale=argmax,
    )

    centers_x, centers_y = _grid_centers(base, model.template_dims, pyr.cell_stride)
    flat_best = best.ravel()
    flat_arg = argmax.ravel()
    detections = []
    for i in np.flatnonzero(flat_best > score_threshold):
        k = int(flat_arg[i])
        box = box_for_scale(
            model.template_dims, (centers_x[i], centers_y[i]),
            k, pyr.scales, pyr.cell_stride,
        )
        detections.append(
            Detection(box=box, score=float(flat_best[i]), scale_index=k, class_id=k)
        )
    return smap, _sorted(nms(detections, nms_threshold))


def baseline_level_scores(pyr, s, w, bias, template_dims):
    """Raw single-template scores over one level.

    The scan covers every anchor whose window overlaps the level's map by
    at least one cell; returns (scores[y, x], x_lo, y_lo) where the score
    of anchor (ax, ay) lives at [ay - y_lo, ax - x_lo].
    """
    tw, th = template_dims
    fmap = pyr.levels[s]
    x_lo, y_lo = 1 - tw, 1 - th
    xs = np.arange(x_lo, fmap.cells_wide)
    ys = np.arange(y_lo, fmap.cells_high)
    gx, gy = np.meshgrid(xs, ys)
    anchors = np.stack([gx.ravel(), gy.ravel()], axis=1)
    scores = _score_windows(fmap, anchors, template_dims, pyr.padding, w, bias)
    return scores.reshape(len(ys), len(xs)), x_lo, y_lo


def score_baseline(
    pyr: FeaturePyramid,
    w: np.ndarray,
    bias: float,
    template_dims,
    score_threshold: float = -np.inf,
):
    """Scan every pyramid level independently with one template.

    Returns unsuppressed detections above the threshold, boxed in
    original-image coordinates.  Levels smaller than the template are
    skipped with a warning.
    """
    tw, th = template_dims
    cx, cy = pyr.cell_stride
    detections = []
    for s in range(pyr.S):
        fmap = pyr.levels[s]
        if fmap.cells_wide < tw or fmap.cells_high < th:
            log.warning(
                "level %d (%dx%d cells) smaller than the %dx%d template; skipped",
                s, fmap.cells_wide, fmap.cells_high, tw, th,
            )
            continue
        scores, x_lo, y_lo = baseline_level_scores(pyr, s, w, bias, template_dims)
        scale = pyr.scales[s]
        for yi, xi in zip(*np.nonzero(scores > score_threshold)):
            ax, ay = xi + x_lo, yi + y_lo
            box = Box(
                x1=ax * cx / scale,
                y1=ay * cy / scale,
                x2=(ax + tw) * cx / scale,
                y2=(ay + th) * cy / scale,
            )
            detections.append(
                Detection(box=box, score=float(scores[yi, xi]),
                          scale_index=s, class_id=0)
            )
    return detections


def score_template_pyramid(
    pyr: FeaturePyramid, model: MssModel, score_threshold: float = -np.inf
):
    """Apply K differently-sized class templates to the original level;
    each cell location is scored by the best class.  Returns unsuppressed
    detections above the threshold."""
    model.require_fingerprint(pyr)
    base = pyr.levels[0]
    cx, cy = pyr.cell_stride
    centers_x, centers_y = _grid_centers(base, model.template_dims, pyr.cell_stride)

    per_class = np.empty((model.K, centers_x.size))
    for k in range(model.K):
        dims_k = tp_template_dims(model.template_dims, k)
        ax = np.round(centers_x / cx - dims_k[0] / 2.0).astype(np.intp)
        ay = np.round(centers_y / cy - dims_k[1] / 2.0).astype(np.intp)
        per_class[k] = _score_windows(
            base, np.stack([ax, ay], axis=1), dims_k, pyr.padding,
            model.weights[k], model.biases[k],
        )

    best = per_class.max(axis=0)
    argmax = per_class.argmax(axis=0)
    detections = []
    for i in np.flatnonzero(best > score_threshold):
        k = int(argmax[i])
        box = box_for_scale(
            model.template_dims, (centers_x[i], centers_y[i]),
            k, pyr.scales, pyr.cell_stride,
        )
        detections.append(
            Detection(box=box, score=float(best[i]), scale_index=k, class_id=k)
        )
    return detections


def _sorted(detections):
    return sorted(detections, key=lambda d: (-d.score, d.box.x1, d.box.y1))


def detect_image(
    source,
    model: MssModel,
    score_threshold: float = 0.0,
    nms_threshold: float = 0.5,
):
    """Run one detector family on an image or a prebuilt/imported
    pyramid; returns detections sorted by descending score."""
    if isinstance(source, Image):
        stride = model.cell_stride
        if stride != int(stride):
            raise ValueError(f"non-integer cell stride {stride} cannot build a pyramid")
        pyr = build_pyramid(source, model.S, int(stride), model.padding)
    elif isinstance(source, FeaturePyramid):
        pyr = source
    else:
        raise TypeError(f"cannot detect on {type(source).__name__}")

    if model.family == "mss":
        _, detections = score_mss(pyr, model, score_threshold, nms_threshold)
        return detections
    model.require_fingerprint(pyr)
    if model.family == "baseline":
        raw = score_baseline(
            pyr, model.weights[0], model.biases[0],
            model.template_dims, score_threshold,
        )
    else:
        raw = score_template_pyramid(pyr, model, score_threshold)
    return _sorted(nms(_sorted(raw), nms_threshold))


# ---------------------------------------------------------------------------
# Detections text format
# ---------------------------------------------------------------------------


def save_detections(entries, path):
    """Write 'image_id score x1 y1 x2 y2 scale_idx' lines for
    (image_id, Detection) pairs."""
    with open(path, "w") as fh:
        for image_id, det in entries:
            b = det.box
            fh.write(
                f"{image_id} {det.score:.9g} {b.x1:.9g} {b.y1:.9g} "
                f"{b.x2:.9g} {b.y2:.9g} {det.scale_index}\n"
            )


def load_detections(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                score = float(parts[1])
                x1, y1, x2, y2 = (float(v) for v in parts[2:6])
                scale_index = int(parts[6])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            entries.append(
                (parts[0],
                 Detection(box=Box(x1=x1, y1=y1, x2=x2, y2=y2),
                           score=score, scale_index=scale_index))
            )
    return entries
