"""Detection evaluation and model analysis.

Average precision follows the usual protocol: detections are matched to
ground truth greedily by descending score, each ground-truth box matches
at most once, and a match requires IoU at or above the overlap
requirement (0.5 by default).  The default AP is the 11-point
interpolated variant; exact integration of the PR curve is available as
``method="continuous"``.

Model analysis splits each class template's weights into the scale block
of its own class ("in-scale") versus all other blocks ("out-of-scale")
and reports the positive- and negative-mass fractions of each side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import Image
from .labels import best_fit_level, overlap_profile
from .learning import MssModel

__all__ = [
    "PRCurve",
    "WeightReport",
    "average_precision",
    "save_pr_csv",
    "weight_analysis",
    "scale_spread",
    "template_heatmap",
]


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray  # unique score thresholds, descending
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    overlap_requirement: float


@dataclass(frozen=True)
class WeightReport:
    """Per-class in/out-of-scale weight-mass fractions.

    ``class_rows`` holds one (class, in_pos, out_pos, in_neg, out_neg)
    tuple per populated class; fractions are None for a sign with zero
    mass.  Classes whose template is all-zero are excluded and counted.
    """

    class_rows: tuple
    mean_in_scale_positive: float
    std_in_scale_positive: float
    mean_out_scale_positive: float
    mean_in_scale_negative: float
    mean_out_scale_negative: float
    excluded_classes: int


def _match_detections(entries, gt_by_image, overlap_requirement):
    """Greedy score-ordered matching; returns (scores, tp_flags, n_gt)."""
    from .geometry import overlap as iou

    ordered = sorted(
        entries, key=lambda e: (-e[1].score, e[0], e[1].box.x1, e[1].box.y1)
    )
    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gt_by_image.items()}
    scores = np.empty(len(ordered))
    tp = np.zeros(len(ordered), dtype=bool)
    for i, (image_id, det) in enumerate(ordered):
        scores[i] = det.score
        boxes = gt_by_image.get(image_id, ())
        best_ov, best_j = 0.0, -1
        for j, gt in enumerate(boxes):
            ov = iou(det.box, gt)
            if ov > best_ov:
                best_ov, best_j = ov, j
        if best_j >= 0 and best_ov >= overlap_requirement and not matched[image_id][best_j]:
            matched[image_id][best_j] = True
            tp[i] = True
    n_gt = sum(len(b) for b in gt_by_image.values())
    return scores, tp, n_gt


def average_precision(
    entries,
    gt_by_image,
    overlap_requirement: float = 0.5,
    method: str = "11point",
) -> PRCurve:
    """Precision/recall curve and AP for (image_id, Detection) pairs
    against a dict of image_id -> ground-truth boxes."""
    n_gt = sum(len(b) for b in gt_by_image.values())
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    if method not in ("11point", "continuous"):
        raise ValueError(f"unknown AP method {method!r}")

    scores, tp, _ = _match_detections(entries, gt_by_image, overlap_requirement)
    if len(scores) == 0:
        return PRCurve(
            thresholds=np.empty(0), precision=np.empty(0), recall=np.empty(0),
            ap=0.0, overlap_requirement=overlap_requirement,
        )

    # Collapse tied scores so each threshold reflects all detections at
    # or above it.
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    last_of_threshold = np.flatnonzero(np.diff(scores, append=np.nan) != 0)
    thresholds = scores[last_of_threshold]
    tp_at = cum_tp[last_of_threshold]
    fp_at = cum_fp[last_of_threshold]
    precision = tp_at / (tp_at + fp_at)
    recall = tp_at / n_gt

    if method == "continuous":
        prev_recall = np.concatenate([[0.0], recall[:-1]])
        ap = float(np.sum((recall - prev_recall) * precision))
    else:
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            reachable = precision[recall >= r]
            ap += (reachable.max() if reachable.size else 0.0) / 11.0
        ap = float(ap)

    return PRCurve(
        thresholds=thresholds, precision=precision, recall=recall,
        ap=ap, overlap_requirement=overlap_requirement,
    )


def save_pr_csv(curve: PRCurve, path):
    """CSV of (threshold, precision, recall) rows plus a trailing AP row."""
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            fh.write(f"{t:.9g},{p:.9g},{r:.9g}\n")
        fh.write(f"AP,{curve.ap:.9g}\n")


# ---------------------------------------------------------------------------
# Weight analysis
# ---------------------------------------------------------------------------


def weight_analysis(model: MssModel) -> WeightReport:
    """Split each class template's weight mass into its own scale block
    versus all other blocks, separately for positive entries and for the
    magnitudes of negative entries."""
    if model.family != "mss":
        raise ValueError("weight analysis applies to multi-scale models only")
    block = model.block_length
    rows = []
    excluded = 0
    for k in range(model.K):
        w = model.weights[k]
        if not w.any():
            excluded += 1
            continue
        w_pos = np.maximum(w, 0.0)
        w_neg = np.maximum(-w, 0.0)
        sl = slice(k * block, (k + 1) * block)

        def fractions(mass):
            total = mass.sum()
            if total <= 0.0:
                return None, None
            inside = mass[sl].sum()
            return inside / total, (total - inside) / total

        in_pos, out_pos = fractions(w_pos)
        in_neg, out_neg = fractions(w_neg)
        rows.append((k, in_pos, out_pos, in_neg, out_neg))
    if not rows:
        raise ValueError("model has no nonzero class templates")

    pos_in = [r[1] for r in rows if r[1] is not None]
    neg_in = [r[3] for r in rows if r[3] is not None]
    return WeightReport(
        class_rows=tuple(rows),
        mean_in_scale_positive=float(np.mean(pos_in)) if pos_in else float("nan"),
        std_in_scale_positive=float(np.std(pos_in)) if pos_in else float("nan"),
        mean_out_scale_positive=float(1.0 - np.mean(pos_in)) if pos_in else float("nan"),
        mean_in_scale_negative=float(np.mean(neg_in)) if neg_in else float("nan"),
        mean_out_scale_negative=float(1.0 - np.mean(neg_in)) if neg_in else float("nan"),
        excluded_classes=excluded,
    )


def save_weight_report_csv(report: WeightReport, path):
    with open(path, "w") as fh:
        fh.write("class,in_scale_pos,out_scale_pos,in_scale_neg,out_scale_neg\n")
        for k, ip, op, in_, on in report.class_rows:
            cells = [
                "" if v is None else f"{v:.9g}" for v in (ip, op, in_, on)
            ]
            fh.write(f"{k},{','.join(cells)}\n")
        fh.write(
            f"mean,{report.mean_in_scale_positive:.9g},"
            f"{report.mean_out_scale_positive:.9g},"
            f"{report.mean_in_scale_negative:.9g},"
            f"{report.mean_out_scale_negative:.9g}\n"
        )
        fh.write(f"excluded_classes,{report.excluded_classes},,,\n")


# ---------------------------------------------------------------------------
# Scale spread and template heatmaps
# ---------------------------------------------------------------------------


def scale_spread(boxes, template_dims, scales, cell_stride):
    """Histogram of per-object best-fit levels plus its entropy (nats).

    A single-size dataset lands in one bin (entropy 0); a flat spread
    over n bins reaches log(n).
    """
    if not boxes:
        raise ValueError("scale spread needs at least one object")
    hist = np.zeros(len(scales), dtype=np.int64)
    for gt in boxes:
        profile = overlap_profile([gt], gt.center, template_dims, scales, cell_stride)
        hist[best_fit_level(profile)] += 1
    probs = hist / hist.sum()
    nonzero = probs[probs > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum())
    return hist, entropy


def template_heatmap(model: MssModel, class_index: int):
    """One image per scale block of a class template: the per-cell
    maximum positive weight over channels, normalized so each image
    peaks at 1.0 (all-black for blocks with no positive weight)."""
    if model.family != "mss":
        raise ValueError("template heatmaps apply to multi-scale models only")
    if not 0 <= class_index < model.K:
        raise IndexError(f"class {class_index} outside [0, {model.K})")
    tw, th = model.template_dims
    blocks = model.weights[class_index].reshape(model.S, th, tw, model.d)
    images = []
    for s in range(model.S):
        heat = np.maximum(blocks[s], 0.0).max(axis=2)
        peak = heat.max()
        if peak > 0.0:
            heat = heat / peak
        images.append(Image(width=tw, height=th, pixels=heat))
    return images
