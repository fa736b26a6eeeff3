"""Max-margin training: a dual coordinate-ascent linear SVM, one-vs-all
training of the multi-scale templates, and a structured SVM that learns
all templates jointly under a localization-aware loss.

The SVM solves min_w 0.5*||w||^2 + C * sum_i hinge(y_i, w.x_i) in the
dual by stochastic coordinate ascent with a duality-gap stopping rule.
The bias is folded in as an appended constant feature of value 10.

Models hold one weight template per scale class.  Three families share
the format:

* ``mss``              -- K templates over the stacked all-level descriptor,
* ``baseline``         -- one template over a single-level window, applied
                          to every pyramid level independently,
* ``template-pyramid`` -- K templates of per-class sizes, all applied to
                          the original-resolution level.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from .features import FEATURE_KINDS, PADDING_MODES, level_scale
from .geometry import Box, box_for_scale, overlap

__all__ = [
    "TrainConfig",
    "ModelGeometry",
    "MssModel",
    "FingerprintError",
    "ModelFormatError",
    "SdcaResult",
    "sdca_train",
    "train_ova",
    "joint_feature_map",
    "perbox_loss",
    "averaged_loss",
    "loss_augmented_infer",
    "train_ssvm",
    "save_model",
    "load_model",
    "tp_template_dims",
]

log = logging.getLogger(__name__)

BIAS_FEATURE = 10.0

MODEL_MAGIC = b"MSSM1\x00"
FAMILIES = ("mss", "baseline", "template-pyramid")

_PAD_CODE = {name: i for i, name in enumerate(PADDING_MODES)}
_PAD_NAME = {i: name for name, i in _PAD_CODE.items()}
_KIND_CODE = {name: i for i, name in enumerate(FEATURE_KINDS)}
_KIND_NAME = {i: name for name, i in _KIND_CODE.items()}
# The feature-kind word also carries the family in its upper bits, so a
# plain MSS model stores a bare 0/1 kind code.
_FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES)}
_FAMILY_NAME = {i: name for name, i in _FAMILY_CODE.items()}


class FingerprintError(ValueError):
    """Model and pyramid disagree on geometry; carries the field diff."""

    def __init__(self, mismatches):
        super().__init__(
            "model/pyramid fingerprint mismatch: " + "; ".join(mismatches)
        )
        self.mismatches = tuple(mismatches)


class ModelFormatError(ValueError):
    """Raised for malformed model files."""


@dataclass
class TrainConfig:
    """Knobs for SVM training and hard-negative mining."""

    C: float = 0.01
    max_iterations: int = 5_000_000
    tolerance: float = 1e-7
    mining_rounds: int = 5
    initial_negatives: int = 5000
    round_cap: int = 5000
    mining_overlap: float = 0.3
    mining_score_threshold: float = -1.0
    seed: int = 0
    ssvm_epochs: int = 30
    # Alternate per-box loss that scores any low-overlap candidate as
    # correct (kept for comparison; the default rewards localization).
    low_overlap_loss: bool = False

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")


@dataclass(frozen=True)
class ModelGeometry:
    """Everything a model needs to know about the pyramid it scores."""

    S: int
    d: int
    template_dims: tuple
    cell_stride: float
    padding: str
    feature_kind: str = "hog"


def tp_template_dims(template_dims, k) -> tuple:
    """Template size in original-resolution cells for scale class k of a
    template pyramid: the base dims grown by 2**(k/2)."""
    tw, th = template_dims
    factor = 2.0 ** (k / 2.0)
    return int(np.round(tw * factor)), int(np.round(th * factor))


@dataclass(frozen=True)
class MssModel:
    """K per-class weight templates plus the pyramid fingerprint."""

    family: str
    K: int
    S: int
    d: int
    template_dims: tuple
    weights: tuple  # per-class float64 vectors
    biases: np.ndarray
    cell_stride: float
    padding: str
    feature_kind: str = "hog"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "mss" and self.K != self.S:
            raise ValueError(
                f"mss models use one class per level, got K={self.K} S={self.S}"
            )
        if self.family == "baseline" and self.K != 1:
            raise ValueError("baseline models have a single template")
        if self.family == "template-pyramid" and self.K != self.S:
            raise ValueError("template pyramids carry one template per level")
        if len(self.weights) != self.K or len(self.biases) != self.K:
            raise ValueError("weight/bias count does not match K")
        weights = []
        for k, w in enumerate(self.weights):
            w = np.ascontiguousarray(w, dtype=np.float64)
            expected = self.class_weight_length(k)
            if w.shape != (expected,):
                raise ValueError(
                    f"class {k} weights have length {w.shape}, expected {expected}"
                )
            if not np.all(np.isfinite(w)):
                raise ValueError(f"class {k} weights contain non-finite values")
            w.flags.writeable = False
            weights.append(w)
        biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if not np.all(np.isfinite(biases)):
            raise ValueError("biases contain non-finite values")
        biases.flags.writeable = False
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "template_dims", tuple(self.template_dims))

    def class_weight_length(self, k) -> int:
        tw, th = self.template_dims
        if self.family == "mss":
            return tw * th * self.d * self.S
        if self.family == "baseline":
            return tw * th * self.d
        tk, hk = tp_template_dims(self.template_dims, k)
        return tk * hk * self.d

    @property
    def block_length(self) -> int:
        tw, th = self.template_dims
        return tw * th * self.d

    @property
    def weight_matrix(self) -> np.ndarray:
        """(K, L) view for families with uniform template length."""
        return np.vstack(self.weights)

    @property
    def expected_scales(self) -> np.ndarray:
        return level_scale(np.arange(self.S))

    def fingerprint_mismatches(self, pyr) -> list:
        """Differences between this model's pyramid fingerprint and an
        actual pyramid; empty means the pyramid is scoreable."""
        diffs = []
        if pyr.S != self.S:
            diffs.append(f"levels: model {self.S}, pyramid {pyr.S}")
        if pyr.d != self.d:
            diffs.append(f"channels: model {self.d}, pyramid {pyr.d}")
        cx, cy = pyr.cell_stride
        if not (cx == cy == self.cell_stride):
            diffs.append(
                f"cell stride: model {self.cell_stride}, pyramid ({cx}, {cy})"
            )
        if pyr.padding != self.padding:
            diffs.append(f"padding: model {self.padding}, pyramid {pyr.padding}")
        n = min(pyr.S, self.S)
        if np.any(np.abs(pyr.scales[:n] - self.expected_scales[:n]) > 1e-9):
            diffs.append("scale schedule deviates from 2**(-s/2)")
        return diffs

    def require_fingerprint(self, pyr):
        diffs = self.fingerprint_mismatches(pyr)
        if diffs:
            raise FingerprintError(diffs)


# ---------------------------------------------------------------------------
# Linear SVM via stochastic dual coordinate ascent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdcaResult:
    w: np.ndarray
    bias: float
    duality_gap: float
    alphas: np.ndarray
    iterations: int


@numba.njit(cache=True)
def _sdca_epoch(X, y, alpha, w, sqnorms, order, C):  # pragma: no cover
    moved = 0.0
    for t in range(order.shape[0]):
        i = order[t]
        xi = X[i]
        margin = 0.0
        for j in range(xi.shape[0]):
            margin += w[j] * xi[j]
        margin *= y[i]
        a_new = alpha[i] + (1.0 - margin) / sqnorms[i]
        if a_new < 0.0:
            a_new = 0.0
        elif a_new > C:
            a_new = C
        delta = a_new - alpha[i]
        if delta != 0.0:
            alpha[i] = a_new
            step = delta * y[i]
            for j in range(xi.shape[0]):
                w[j] += step * xi[j]
            moved += abs(delta)
    return moved


def _duality_gap(X, y, alpha, w, C):
    margins = y * (X @ w)
    primal = 0.5 * w @ w + C * np.maximum(0.0, 1.0 - margins).sum()
    dual = alpha.sum() - 0.5 * w @ w
    return primal - dual


def _with_bias_feature(X):
    return np.hstack([X, np.full((X.shape[0], 1), BIAS_FEATURE)])


def sdca_train(positives, negatives, config: TrainConfig, seed=None) -> SdcaResult:
    """Train a binary hinge-loss SVM by stochastic dual coordinate ascent.

    Stops once the duality gap drops to ``config.tolerance``, the
    iteration budget is spent, or a full epoch moves no dual variable.
    The returned weights exclude the internal bias feature.
    """
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.shape[0] < 1 or neg.shape[0] < 1:
        raise ValueError("training needs at least one sample of each sign")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError(
            f"inconsistent descriptor lengths: {pos.shape[1]} vs {neg.shape[1]}"
        )
    X = _with_bias_feature(np.vstack([pos, neg]))
    if not np.all(np.isfinite(X)):
        raise ValueError("training descriptors contain non-finite values")
    y = np.concatenate([np.ones(pos.shape[0]), -np.ones(neg.shape[0])])

    n = X.shape[0]
    alpha = np.zeros(n)
    w = np.zeros(X.shape[1])
    sqnorms = np.einsum("ij,ij->i", X, X)
    rng = np.random.default_rng(config.seed if seed is None else seed)

    iterations = 0
    gap = np.inf
    while iterations < config.max_iterations:
        budget = min(n, config.max_iterations - iterations)
        order = rng.permutation(n)[:budget].astype(np.int64)
        moved = _sdca_epoch(X, y, alpha, w, sqnorms, order, config.C)
        iterations += budget
        gap = _duality_gap(X, y, alpha, w, config.C)
        if gap <= config.tolerance or moved == 0.0:
            break

    return SdcaResult(
        w=w[:-1].copy(),
        bias=float(w[-1] * BIAS_FEATURE),
        duality_gap=float(gap),
        alphas=alpha,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# One-vs-all training
# ---------------------------------------------------------------------------


def _split_samples(samples):
    positives = [s for s in samples if s.label.class_sign == 1]
    negatives = [s for s in samples if s.label.class_sign == -1]
    return positives, negatives


def train_ova(samples, config: TrainConfig, geometry: ModelGeometry) -> MssModel:
    """Train K independent binary SVMs, one per scale class.

    Class s positives are the samples whose scale label activates s;
    negatives are background samples only (positives of other classes are
    left out entirely).  Classes with no positives get a zero template.
    """
    positives, negatives = _split_samples(samples)
    if not negatives:
        raise ValueError("one-vs-all training needs background samples")
    neg_X = np.stack([s.descriptor for s in negatives])

    K = geometry.S
    weights, biases = [], np.zeros(K)
    trained = 0
    for s in range(K):
        pos = [p.descriptor for p in positives if p.label.scale_labels[s]]
        if not pos:
            log.warning("scale class %d has no positives; emitting a zero template", s)
            weights.append(np.zeros(neg_X.shape[1]))
            continue
        result = sdca_train(
            np.stack(pos), neg_X, config, seed=(config.seed, 101, s)
        )
        weights.append(result.w)
        biases[s] = result.bias
        trained += 1
    if trained == 0:
        raise ValueError("no scale class has positive samples")

    return MssModel(
        family="mss",
        K=K,
        S=geometry.S,
        d=geometry.d,
        template_dims=geometry.template_dims,
        weights=tuple(weights),
        biases=biases,
        cell_stride=geometry.cell_stride,
        padding=geometry.padding,
        feature_kind=geometry.feature_kind,
    )


# ---------------------------------------------------------------------------
# Structured SVM
# ---------------------------------------------------------------------------


# Overlap at which a predicted box counts as matching the ground truth.
PEAK_LOSS_OVERLAP = 0.6


def joint_feature_map(psi, y: int, K: int) -> np.ndarray:
    """Class-indexed embedding: block y holds psi, all others are zero."""
    psi = np.asarray(psi, dtype=np.float64)
    if not 0 <= y < K:
        raise IndexError(f"class index {y} outside [0, {K})")
    out = np.zeros(K * psi.size)
    out[y * psi.size : (y + 1) * psi.size] = psi
    return out


def perbox_loss(
    candidate_is_background: bool,
    candidate_box,
    gt_boxes,
    low_overlap_is_correct: bool = False,
) -> int:
    """0/1 loss of one predicted box against the ground truth.

    Default rule: a background prediction is correct when no ground-truth
    box sits at its location, and an object prediction is correct when it
    overlaps some ground-truth box by at least 0.6.  The alternate rule
    (``low_overlap_is_correct``) instead scores any prediction whose
    overlap stays below 0.6 as correct.
    """
    max_ov = 0.0
    if gt_boxes and candidate_box is not None:
        max_ov = max(overlap(candidate_box, gt) for gt in gt_boxes)
    if low_overlap_is_correct:
        both_background = candidate_is_background and not gt_boxes
        return 0 if (both_background or max_ov < PEAK_LOSS_OVERLAP) else 1
    if candidate_is_background:
        return 0 if max_ov < PEAK_LOSS_OVERLAP else 1
    return 0 if max_ov >= PEAK_LOSS_OVERLAP else 1


def averaged_loss(candidates, gt_boxes, low_overlap_is_correct: bool = False) -> float:
    """Mean per-box loss over M predicted boxes, in [0, 1]."""
    if not candidates:
        raise ValueError("averaged loss needs at least one prediction")
    total = sum(
        perbox_loss(is_bg, box, gt_boxes, low_overlap_is_correct)
        for is_bg, box in candidates
    )
    return total / len(candidates)


def loss_augmented_infer(scores, losses) -> int:
    """argmax over candidates of score + loss.  Candidates are the K
    scale classes followed by background (index K); background scores 0.
    Ties resolve to the lowest index."""
    augmented = np.append(np.asarray(scores, dtype=np.float64), 0.0) + losses
    return int(np.argmax(augmented))


def _ssvm_sample_losses(sample, K, template_dims, scales, cell_stride, low_overlap):
    """Loss of predicting each candidate (classes 0..K-1, then background)
    for one training sample, judged against the sample's own box."""
    losses = np.empty(K + 1)
    if sample.label.class_sign == -1:
        losses[:K] = 1.0
        losses[K] = 0.0
        return losses, K
    box = sample.label.box
    gt = [box]
    center = box.center
    for k in range(K):
        cand = box_for_scale(template_dims, center, k, scales, cell_stride)
        losses[k] = perbox_loss(False, cand, gt, low_overlap)
    losses[K] = perbox_loss(True, box, gt, low_overlap)
    true_class = int(np.argmax(sample.label.scale_labels))
    return losses, true_class


def train_ssvm(
    samples,
    config: TrainConfig,
    geometry: ModelGeometry,
    objective_callback=None,
) -> MssModel:
    """Train the joint weight vector over all scale classes by averaged
    stochastic subgradient descent on the margin-rescaled hinge.

    Each step runs loss-augmented inference over the K classes plus
    background, then applies the subgradient with step size 1/(lambda*t)
    where lambda = 1/(C*n).  The averaged iterate is returned.
    """
    positives, negatives = _split_samples(samples)
    if not positives or not negatives:
        raise ValueError("structured training needs samples of both signs")

    K = geometry.S
    scales = level_scale(np.arange(geometry.S))
    X = _with_bias_feature(np.stack([s.descriptor for s in samples]))
    n, dim = X.shape

    losses = np.empty((n, K + 1))
    true_class = np.empty(n, dtype=np.intp)
    for i, sample in enumerate(samples):
        losses[i], true_class[i] = _ssvm_sample_losses(
            sample, K, geometry.template_dims, scales,
            geometry.cell_stride, config.low_overlap_loss,
        )

    lam = 1.0 / (config.C * n)
    W = np.zeros((K, dim))
    W_avg = np.zeros_like(W)
    rng = np.random.default_rng((config.seed, 202))

    t = 0
    for epoch in range(config.ssvm_epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            x = X[i]
            pred = loss_augmented_infer(W @ x, losses[i])
            W *= 1.0 - eta * lam
            truth = true_class[i]
            if pred != truth:
                scaled = eta * x
                if pred < K:
                    W[pred] -= scaled
                if truth < K:
                    W[truth] += scaled
            W_avg += (W - W_avg) / t
        if objective_callback is not None:
            objective_callback(epoch, _ssvm_objective(W, X, losses, true_class, lam))

    weights = tuple(W_avg[k, :-1].copy() for k in range(K))
    biases = W_avg[:, -1] * BIAS_FEATURE
    return MssModel(
        family="mss",
        K=K,
        S=geometry.S,
        d=geometry.d,
        template_dims=geometry.template_dims,
        weights=weights,
        biases=biases,
        cell_stride=geometry.cell_stride,
        padding=geometry.padding,
        feature_kind=geometry.feature_kind,
    )


def _ssvm_objective(W, X, losses, true_class, lam):
    scores = X @ W.T  # (n, K)
    n, K = scores.shape
    augmented = np.hstack([scores, np.zeros((n, 1))]) + losses
    true_scores = np.where(
        true_class < K, scores[np.arange(n), np.minimum(true_class, K - 1)], 0.0
    )
    slack = np.maximum(0.0, augmented.max(axis=1) - true_scores)
    return 0.5 * lam * np.sum(W * W) + slack.mean()


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def save_model(model: MssModel, path):
    """Write a model file; weights are stored as little-endian float32
    and round-trip bit-exactly through :func:`load_model`."""
    kind_word = _KIND_CODE[model.feature_kind] | (_FAMILY_CODE[model.family] << 8)
    tw, th = model.template_dims
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(
            struct.pack(
                "<7I", model.K, model.S, model.d, tw, th,
                kind_word, _PAD_CODE[model.padding],
            )
        )
        fh.write(struct.pack("<d", model.cell_stride))
        for k in range(model.K):
            fh.write(struct.pack("<f", model.biases[k]))
            fh.write(model.weights[k].astype("<f4").tobytes())


def load_model(path) -> MssModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(
            f"magic mismatch: expected {MODEL_MAGIC!r}, found {data[:6]!r}"
        )
    pos = len(MODEL_MAGIC)
    header = struct.calcsize("<7Id")
    if len(data) < pos + header:
        raise ModelFormatError("truncated header")
    K, S, d, tw, th, kind_word, pad_code = struct.unpack_from("<7I", data, pos)
    (cell_stride,) = struct.unpack_from("<d", data, pos + 28)
    pos += header

    kind_code = kind_word & 0xFF
    family_code = kind_word >> 8
    if kind_code not in _KIND_NAME:
        raise ModelFormatError(f"unknown feature-kind code {kind_code}")
    if family_code not in _FAMILY_NAME:
        raise ModelFormatError(f"unknown family code {family_code}")
    if pad_code not in _PAD_NAME:
        raise ModelFormatError(f"unknown padding code {pad_code}")
    family = _FAMILY_NAME[family_code]

    weights, biases = [], np.zeros(K)
    for k in range(K):
        if family == "mss":
            length = tw * th * d * S
        elif family == "baseline":
            length = tw * th * d
        else:
            tk, hk = tp_template_dims((tw, th), k)
            length = tk * hk * d
        nbytes = 4 + 4 * length
        if len(data) < pos + nbytes:
            raise ModelFormatError(
                f"class {k}: weight block needs {nbytes} bytes, "
                f"file has {len(data) - pos}"
            )
        (biases[k],) = struct.unpack_from("<f", data, pos)
        weights.append(
            np.frombuffer(data, dtype="<f4", count=length, offset=pos + 4).astype(
                np.float64
            )
        )
        pos += nbytes
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after {K} classes")

    return MssModel(
        family=family,
        K=K,
        S=S,
        d=d,
        template_dims=(tw, th),
        weights=tuple(weights),
        biases=biases,
        cell_stride=float(cell_stride),
        padding=_PAD_NAME[pad_code],
        feature_kind=_KIND_NAME[kind_code],
    )
