"""Hard-negative mining and the full train/mine/retrain driver.

Training starts from a random pool of background windows, fits the
requested detector family, then repeatedly scores the training images,
collects high-scoring windows that overlap every ground-truth box by
less than the mining threshold, retrains, and stops when a round adds
less than 1% of the pool or the round cap is reached.  Multi-scale
candidates are collected only when they are negative for all K scale
classes (every class's implied box clears the overlap test).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .detect import (
    _grid_centers,
    _mapped_anchors,
    baseline_level_scores,
    detect_image,
    mss_score_grid,
)
from .evaluate import average_precision
from .features import FeaturePyramid, build_pyramid, read_windows
from .geometry import box_for_scale, overlap_many
from .imaging import Image
from .labels import (
    SampleLabel,
    TrainingSample,
    best_fit_level,
    extract_positives,
    model_dims,
    overlap_profile,
    threshold_profile,
    virtual_positives,
)
from .learning import (
    ModelGeometry,
    MssModel,
    TrainConfig,
    sdca_train,
    tp_template_dims,
    train_ova,
    train_ssvm,
)
from .parallel import parallel_map

__all__ = [
    "FAMILY_CHOICES",
    "TrainImage",
    "MiningState",
    "TrainResult",
    "train_detector",
    "mine_hard_negatives",
    "dataset_detections",
    "evaluate_detector",
]

log = logging.getLogger(__name__)

FAMILY_CHOICES = ("baseline", "template-pyramid", "mss-ova", "mss-ssvm")

# Padding policy per family: replication suits the per-level baseline
# scan; the multi-scale stack is scored on zero-padded pyramids.
DEFAULT_PADDING = {
    "baseline": "replicate",
    "template-pyramid": "replicate",
    "mss-ova": "zero",
    "mss-ssvm": "zero",
}

# A mining round converges when it grows the pool by less than this.
_CONVERGED_FRACTION = 0.01

_MAX_DRAW_FACTOR = 60


@dataclass(frozen=True)
class TrainImage:
    """One training image (or imported pyramid) with its ground truth."""

    image_id: str
    source: object  # Image or FeaturePyramid
    boxes: tuple

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass
class MiningState:
    """Negative pool shared across mining rounds.

    ``pools`` maps a class key to descriptor lists; single-template
    families use key 0, template pyramids keep one pool per class (their
    descriptor lengths differ).  The pool only ever grows.
    """

    round_index: int = 0
    pools: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    keys: set = field(default_factory=set)
    added_per_round: list = field(default_factory=list)
    converged: bool = False

    @property
    def pool_size(self):
        return sum(len(p) for p in self.pools.values())

    def add(self, class_key, key, descriptor, provenance):
        self.pools.setdefault(class_key, []).append(descriptor)
        self.provenance.setdefault(class_key, []).append(provenance)
        self.keys.add(key)


@dataclass
class TrainResult:
    model: MssModel
    geometry: ModelGeometry
    template_dims: tuple
    log_rows: list  # (round, pool_size, additions, train_ap)
    state: MiningState
    positives: int
    skipped_positives: int
    round_models: list


# ---------------------------------------------------------------------------
# Pyramid plumbing
# ---------------------------------------------------------------------------


def _resolve_pyramid(source, levels, cell_size):
    if isinstance(source, FeaturePyramid):
        return source
    if isinstance(source, Image):
        return build_pyramid(source, levels, cell_size, padding="zero")
    raise TypeError(f"cannot train on {type(source).__name__}")


class _PyramidCache:
    """Builds each image's pyramid once; padding variants share levels."""

    def __init__(self, levels, cell_size, cache=None):
        self.levels = levels
        self.cell_size = cell_size
        self.cache = cache if cache is not None else {}

    def get(self, image_id, source, padding):
        pyr = self.cache.get(image_id)
        if pyr is None:
            pyr = _resolve_pyramid(source, self.levels, self.cell_size)
            self.cache[image_id] = pyr
        return pyr.with_padding(padding)

    def warm(self, items):
        missing = [(iid, src) for iid, src in items if iid not in self.cache]
        built = parallel_map(
            lambda pair: _resolve_pyramid(pair[1], self.levels, self.cell_size),
            missing,
        )
        for (iid, _), pyr in zip(missing, built):
            self.cache[iid] = pyr


# ---------------------------------------------------------------------------
# Positive extraction per family
# ---------------------------------------------------------------------------


def _single_scale_positives(pyr, boxes, template_dims, image_id, family, provenance):
    """Best-fit-level window descriptors for baseline/template-pyramid
    training; objects with no scale label are skipped."""
    samples = []
    skipped = 0
    cx, cy = pyr.cell_stride
    for gt in boxes:
        center = gt.center
        profile = overlap_profile(boxes, center, template_dims, pyr.scales, pyr.cell_stride)
        labels = threshold_profile(profile)
        if not labels.any():
            skipped += 1
            continue
        star = best_fit_level(profile)
        if family == "baseline":
            scale = pyr.scales[star]
            ax = int(np.round(center[0] * scale / cx - template_dims[0] / 2.0))
            ay = int(np.round(center[1] * scale / cy - template_dims[1] / 2.0))
            desc = read_windows(
                pyr.levels[star], [[ax, ay]], template_dims, pyr.padding
            )[0]
        else:
            dims_k = tp_template_dims(template_dims, star)
            ax = int(np.round(center[0] / cx - dims_k[0] / 2.0))
            ay = int(np.round(center[1] / cy - dims_k[1] / 2.0))
            desc = read_windows(pyr.levels[0], [[ax, ay]], dims_k, pyr.padding)[0]
        label = SampleLabel(class_sign=1, box=gt, scale_labels=labels)
        samples.append(
            TrainingSample(descriptor=desc, label=label,
                           source=(image_id, center, provenance))
        )
    return samples, skipped


def _collect_positives(records, cache, family, padding, template_dims,
                       virtual_count, cell_size, levels):
    samples, skipped = [], 0
    extra_records = []
    for rec in records:
        if not rec.boxes:
            continue
        pyr = cache.get(rec.image_id, rec.source, padding)
        extra_records.append((rec, pyr, "original"))
        if virtual_count > 0:
            if not isinstance(rec.source, Image):
                raise ValueError(
                    "virtual positives need raw images, not imported pyramids"
                )
            copies = virtual_positives(
                rec.source, list(rec.boxes), virtual_count, min_side=cell_size
            )
            for v, (vimg, vboxes) in enumerate(copies):
                vid = f"{rec.image_id}#virtual{v}"
                vpyr = cache.get(vid, vimg, padding)
                if vpyr.S != levels:
                    continue  # resized copy too small for the full pyramid
                extra_records.append(
                    (TrainImage(vid, vimg, vboxes), vpyr, "virtual")
                )

    for rec, pyr, provenance in extra_records:
        if family in ("mss-ova", "mss-ssvm"):
            got, miss = extract_positives(
                pyr, list(rec.boxes), template_dims, rec.image_id, provenance
            )
        else:
            got, miss = _single_scale_positives(
                pyr, list(rec.boxes), template_dims, rec.image_id, family, provenance
            )
        samples.extend(got)
        if provenance == "original":
            skipped += miss
    return samples, skipped


# ---------------------------------------------------------------------------
# Negative sampling and mining
# ---------------------------------------------------------------------------


def _max_class_overlap(boxes, centers_x, centers_y, template_dims, scales,
                       cell_stride, classes):
    """Max IoU between any ground-truth box and the implied box of each
    candidate center, over the given scale classes; shape (N,)."""
    worst = np.zeros(centers_x.shape[0])
    if not boxes:
        return worst
    for k in classes:
        probe = box_for_scale(template_dims, (0.0, 0.0), k, scales, cell_stride)
        half_w = (probe.x2 - probe.x1) / 2.0
        half_h = (probe.y2 - probe.y1) / 2.0
        for gt in boxes:
            ov = overlap_many(
                gt,
                centers_x - half_w, centers_y - half_h,
                centers_x + half_w, centers_y + half_h,
            )
            np.maximum(worst, ov, out=worst)
    return worst


def _initial_negatives(records, cache, family, padding, template_dims,
                       levels, config, state):
    """Seed the pool with random background windows that clear the
    mining-overlap rule; deterministic for a fixed seed."""
    rng = np.random.default_rng((config.seed, 11))
    target = config.initial_negatives
    attempts = 0
    scales_cache = {}
    while state.pool_size < target and attempts < target * _MAX_DRAW_FACTOR:
        attempts += 1
        rec = records[int(rng.integers(len(records)))]
        pyr = cache.get(rec.image_id, rec.source, padding)
        base = pyr.levels[0]
        scales = pyr.scales
        cx, cy = pyr.cell_stride
        tw, th = template_dims

        if family in ("mss-ova", "mss-ssvm"):
            x0 = int(rng.integers(base.cells_wide))
            y0 = int(rng.integers(base.cells_high))
            key = (rec.image_id, x0, y0)
            if key in state.keys:
                continue
            ctr_x = np.array([(x0 + tw / 2.0) * cx])
            ctr_y = np.array([(y0 + th / 2.0) * cy])
            ov = _max_class_overlap(
                rec.boxes, ctr_x, ctr_y, template_dims, scales, pyr.cell_stride,
                range(pyr.S),
            )[0]
            if ov >= config.mining_overlap:
                continue
            desc = _multiscale_descriptors(pyr, ctr_x, ctr_y, template_dims)[0]
            state.add(0, key, desc, "random")
        elif family == "baseline":
            s = int(rng.integers(pyr.S))
            fmap = pyr.levels[s]
            if fmap.cells_wide < tw or fmap.cells_high < th:
                continue
            ax = int(rng.integers(1 - tw, fmap.cells_wide))
            ay = int(rng.integers(1 - th, fmap.cells_high))
            key = (rec.image_id, s, ax, ay)
            if key in state.keys:
                continue
            scale = scales[s]
            ctr_x = np.array([(ax + tw / 2.0) * cx / scale])
            ctr_y = np.array([(ay + th / 2.0) * cy / scale])
            ov = _max_class_overlap(
                rec.boxes, ctr_x, ctr_y, template_dims, scales, pyr.cell_stride, [s]
            )[0]
            if ov >= config.mining_overlap:
                continue
            desc = read_windows(fmap, [[ax, ay]], template_dims, pyr.padding)[0]
            state.add(0, key, desc, "random")
        else:  # template-pyramid
            k = int(rng.integers(levels))
            dims_k = tp_template_dims(template_dims, k)
            base_map = pyr.levels[0]
            ax = int(rng.integers(1 - dims_k[0], base_map.cells_wide))
            ay = int(rng.integers(1 - dims_k[1], base_map.cells_high))
            key = (rec.image_id, k, ax, ay)
            if key in state.keys:
                continue
            ctr_x = np.array([(ax + dims_k[0] / 2.0) * cx])
            ctr_y = np.array([(ay + dims_k[1] / 2.0) * cy])
            ov = _max_class_overlap(
                rec.boxes, ctr_x, ctr_y, template_dims, scales, pyr.cell_stride, [k]
            )[0]
            if ov >= config.mining_overlap:
                continue
            desc = read_windows(base_map, [[ax, ay]], dims_k, pyr.padding)[0]
            state.add(k, key, desc, "random")
    if state.pool_size < target:
        log.warning(
            "drew %d/%d initial negatives before hitting the attempt cap",
            state.pool_size, target,
        )
    state.added_per_round.append(state.pool_size)


def _multiscale_descriptors(pyr, centers_x, centers_y, template_dims):
    """Stacked all-level descriptors for a batch of center points;
    matches the per-point reads used at scoring time."""
    parts = []
    for s in range(pyr.S):
        anchors = _mapped_anchors(
            centers_x, centers_y, pyr.scales[s], pyr.cell_stride, template_dims
        )
        parts.append(read_windows(pyr.levels[s], anchors, template_dims, pyr.padding))
    return np.hstack(parts)


def mine_hard_negatives(model, records, cache, config, state) -> int:
    """One mining pass: collect up to ``config.round_cap`` new negatives
    whose score clears the mining threshold and whose implied boxes all
    overlap the ground truth below the mining-overlap threshold.

    Returns the number of descriptors added; updates the state in place.
    """
    family = model.family
    template_dims = model.template_dims
    candidates = []  # (score, key, class_key, image_id, payload)

    def render(rec):
        pyr = cache.get(rec.image_id, rec.source, model.padding)
        found = []
        cx, cy = pyr.cell_stride
        if family == "mss":
            grids = mss_score_grid(pyr, model)
            best = grids.max(axis=0).ravel()
            centers_x, centers_y = _grid_centers(
                pyr.levels[0], template_dims, pyr.cell_stride
            )
            hot = np.flatnonzero(best > config.mining_score_threshold)
            if hot.size:
                ov = _max_class_overlap(
                    rec.boxes, centers_x[hot], centers_y[hot], template_dims,
                    pyr.scales, pyr.cell_stride, range(model.K),
                )
                for idx, j in enumerate(hot):
                    if ov[idx] >= config.mining_overlap:
                        continue
                    x0 = int(j % pyr.levels[0].cells_wide)
                    y0 = int(j // pyr.levels[0].cells_wide)
                    key = (rec.image_id, x0, y0)
                    found.append(
                        (float(best[j]), key, 0,
                         (pyr, centers_x[j], centers_y[j], None))
                    )
        elif family == "baseline":
            tw, th = template_dims
            for s in range(pyr.S):
                fmap = pyr.levels[s]
                if fmap.cells_wide < tw or fmap.cells_high < th:
                    continue
                scores, x_lo, y_lo = baseline_level_scores(
                    pyr, s, model.weights[0], model.biases[0], template_dims
                )
                ys, xs = np.nonzero(scores > config.mining_score_threshold)
                if not len(xs):
                    continue
                ax, ay = xs + x_lo, ys + y_lo
                scale = pyr.scales[s]
                ctr_x = (ax + tw / 2.0) * cx / scale
                ctr_y = (ay + th / 2.0) * cy / scale
                ov = _max_class_overlap(
                    rec.boxes, ctr_x, ctr_y, template_dims, pyr.scales,
                    pyr.cell_stride, [s],
                )
                for i in range(len(ax)):
                    if ov[i] >= config.mining_overlap:
                        continue
                    key = (rec.image_id, s, int(ax[i]), int(ay[i]))
                    found.append(
                        (float(scores[ys[i], xs[i]]), key, 0,
                         (pyr, s, int(ax[i]), int(ay[i])))
                    )
        else:  # template-pyramid
            base = pyr.levels[0]
            centers_x, centers_y = _grid_centers(base, template_dims, pyr.cell_stride)
            for k in range(model.K):
                dims_k = tp_template_dims(template_dims, k)
                ax = np.round(centers_x / cx - dims_k[0] / 2.0).astype(np.intp)
                ay = np.round(centers_y / cy - dims_k[1] / 2.0).astype(np.intp)
                scores = (
                    read_windows(base, np.stack([ax, ay], axis=1), dims_k, pyr.padding)
                    @ model.weights[k] + model.biases[k]
                )
                hot = np.flatnonzero(scores > config.mining_score_threshold)
                if not hot.size:
                    continue
                ov = _max_class_overlap(
                    rec.boxes, centers_x[hot], centers_y[hot], template_dims,
                    pyr.scales, pyr.cell_stride, [k],
                )
                for idx, j in enumerate(hot):
                    if ov[idx] >= config.mining_overlap:
                        continue
                    key = (rec.image_id, k, int(ax[j]), int(ay[j]))
                    found.append(
                        (float(scores[j]), key, k,
                         (pyr, k, int(ax[j]), int(ay[j])))
                    )
        return found

    for found in parallel_map(render, records):
        for score, key, class_key, payload in found:
            if key not in state.keys:
                candidates.append((score, key, class_key, payload))

    candidates.sort(key=lambda c: (-c[0], c[1]))
    added = 0
    for score, key, class_key, payload in candidates[: config.round_cap]:
        pyr = payload[0]
        if family == "mss":
            _, ctr_x, ctr_y, _ = payload
            desc = _multiscale_descriptors(
                pyr, np.array([ctr_x]), np.array([ctr_y]), template_dims
            )[0]
        elif family == "baseline":
            _, s, ax, ay = payload
            desc = read_windows(
                pyr.levels[s], [[ax, ay]], template_dims, pyr.padding
            )[0]
        else:
            _, k, ax, ay = payload
            desc = read_windows(
                pyr.levels[0], [[ax, ay]], tp_template_dims(template_dims, k),
                pyr.padding,
            )[0]
        state.add(class_key, key, desc, "mined")
        added += 1
    return added


# ---------------------------------------------------------------------------
# Per-family training on the current pool
# ---------------------------------------------------------------------------


def _negative_samples(state, class_key, length):
    descs = state.pools.get(class_key, [])
    prov = state.provenance.get(class_key, [])
    zero = np.zeros(length, dtype=np.int8)
    return [
        TrainingSample(
            descriptor=d,
            label=SampleLabel(class_sign=-1, box=None, scale_labels=zero),
            source=("", (0.0, 0.0), p),
        )
        for d, p in zip(descs, prov)
    ]


def _fit(family, positives, state, config, geometry):
    if family in ("mss-ova", "mss-ssvm"):
        samples = positives + _negative_samples(state, 0, geometry.S)
        if family == "mss-ova":
            return train_ova(samples, config, geometry)
        return train_ssvm(samples, config, geometry)

    if family == "baseline":
        pos = np.stack([p.descriptor for p in positives])
        neg = np.stack(state.pools[0])
        result = sdca_train(pos, neg, config, seed=(config.seed, 101, 0))
        return MssModel(
            family="baseline", K=1, S=geometry.S, d=geometry.d,
            template_dims=geometry.template_dims,
            weights=(result.w,), biases=np.array([result.bias]),
            cell_stride=geometry.cell_stride, padding=geometry.padding,
            feature_kind=geometry.feature_kind,
        )

    # template pyramid: one SVM per scale class, sized per class
    K = geometry.S
    weights, biases = [], np.zeros(K)
    trained = 0
    for k in range(K):
        dims_k = tp_template_dims(geometry.template_dims, k)
        length = dims_k[0] * dims_k[1] * geometry.d
        pos = [p.descriptor for p in positives if p.label.scale_labels[k]]
        neg = state.pools.get(k, [])
        if not pos or not neg:
            log.warning("template-pyramid class %d lacks %s; zero template",
                        k, "positives" if not pos else "negatives")
            weights.append(np.zeros(length))
            continue
        result = sdca_train(np.stack(pos), np.stack(neg), config,
                            seed=(config.seed, 101, k))
        weights.append(result.w)
        biases[k] = result.bias
        trained += 1
    if trained == 0:
        raise ValueError("no template-pyramid class was trainable")
    return MssModel(
        family="template-pyramid", K=K, S=geometry.S, d=geometry.d,
        template_dims=geometry.template_dims,
        weights=tuple(weights), biases=biases,
        cell_stride=geometry.cell_stride, padding=geometry.padding,
        feature_kind=geometry.feature_kind,
    )


# ---------------------------------------------------------------------------
# Dataset-level detection and evaluation
# ---------------------------------------------------------------------------


def dataset_detections(model, records, cache=None, score_threshold=0.0,
                       nms_threshold=0.5, levels=None, cell_size=8):
    """Detections over a list of TrainImage records as (image_id,
    Detection) pairs, sorted deterministically."""
    if cache is None:
        cache = _PyramidCache(levels or model.S, cell_size)
    entries = []

    def run(rec):
        pyr = cache.get(rec.image_id, rec.source, model.padding)
        return detect_image(pyr, model, score_threshold, nms_threshold)

    for rec, dets in zip(records, parallel_map(run, records)):
        entries.extend((rec.image_id, d) for d in dets)
    return entries


def evaluate_detector(model, records, cache=None, overlap_requirement=0.5,
                      score_threshold=0.0, nms_threshold=0.5, method="11point"):
    """Average precision of a model over a dataset."""
    entries = dataset_detections(model, records, cache, score_threshold, nms_threshold)
    gt = {rec.image_id: list(rec.boxes) for rec in records}
    return average_precision(entries, gt, overlap_requirement, method=method).ap


# ---------------------------------------------------------------------------
# Full driver
# ---------------------------------------------------------------------------


def train_detector(
    records,
    family: str,
    config: TrainConfig,
    levels: int,
    cell_size: int = 8,
    padding: str | None = None,
    virtual_count: int = 0,
    pyramid_cache: dict | None = None,
    keep_round_models: bool = False,
    eval_train_ap: bool = True,
) -> TrainResult:
    """Train one detector family with hard-negative mining.

    ``records`` is a list of TrainImage (raw images or imported
    pyramids).  One log row (round, pool size, additions, train AP) is
    emitted per training round; round 0 uses the random pool only.
    """
    if family not in FAMILY_CHOICES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILY_CHOICES}")
    if not records:
        raise ValueError("training needs at least one image")
    padding = padding or DEFAULT_PADDING[family]

    cache = _PyramidCache(levels, cell_size, pyramid_cache)
    cache.warm((rec.image_id, rec.source) for rec in records)

    first = cache.get(records[0].image_id, records[0].source, padding)
    actual_levels = first.S
    if actual_levels < levels:
        log.warning(
            "pyramid truncated to %d of %d requested levels", actual_levels, levels
        )
        levels = actual_levels
    feature_kind = first.feature_kind

    all_boxes = [b for rec in records for b in rec.boxes]
    if not all_boxes:
        raise ValueError("no ground-truth boxes; nothing to train")
    template_dims = model_dims(all_boxes, first.cell_stride)
    geometry = ModelGeometry(
        S=levels, d=first.d, template_dims=template_dims,
        cell_stride=float(first.cell_stride[0]), padding=padding,
        feature_kind=feature_kind,
    )

    positives, skipped = _collect_positives(
        records, cache, family, padding, template_dims,
        virtual_count, cell_size, levels,
    )
    if not positives:
        raise ValueError("no trainable positives (every object missed 0.6 overlap)")
    if skipped:
        log.info("skipped %d objects with no matching scale label", skipped)

    state = MiningState()
    _initial_negatives(records, cache, family, padding, template_dims,
                       levels, config, state)
    if state.pool_size == 0:
        raise ValueError("could not sample any initial negatives")

    model = _fit(family, positives, state, config, geometry)
    round_models = [(0, model)] if keep_round_models else []
    log_rows = []

    def log_round(round_index, additions):
        ap = (
            evaluate_detector(model, records, cache)
            if eval_train_ap else float("nan")
        )
        log_rows.append((round_index, state.pool_size, additions, ap))

    log_round(0, state.pool_size)

    for round_index in range(1, config.mining_rounds + 1):
        state.round_index = round_index
        added = mine_hard_negatives(model, records, cache, config, state)
        state.added_per_round.append(added)
        if added > 0:
            model = _fit(family, positives, state, config, geometry)
            if keep_round_models:
                round_models.append((round_index, model))
        log_round(round_index, added)
        if added < _CONVERGED_FRACTION * state.pool_size:
            state.converged = True
            break
    if not state.converged and config.mining_rounds > 0:
        state.converged = state.round_index >= config.mining_rounds

    return TrainResult(
        model=model,
        geometry=geometry,
        template_dims=template_dims,
        log_rows=log_rows,
        state=state,
        positives=len(positives),
        skipped_positives=skipped,
        round_models=round_models,
    )
