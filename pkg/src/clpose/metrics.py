"""Evaluation protocols: PCK/PCKh for single-person data, OKS AP/AR for
COCO-style multi-instance data.

Boundary conventions, since different evaluators disagree: PCK counts an
error exactly equal to alpha * normalizer as correct (<=), and OKS matching
accepts a similarity exactly equal to the threshold (>=).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import DecodedPose, PoseInstance
from .errors import ContractError, DataError

# PCKh convention: head size is this fraction of the head-box diagonal.
HEAD_DIAGONAL_FRACTION = 0.6

DEFAULT_OKS_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.50 + 0.05 * i, 2) for i in range(10)
)

_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class NormalizerKind(str, enum.Enum):
    TORSO = "torso"
    HEAD = "head"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class NormalizerSpec:
    """How to derive the PCK normalizing length for an instance.

    value is required for the explicit kind. torso_endpoints, when given,
    overrides the endpoints stored in the instance metadata.
    """

    kind: NormalizerKind
    value: float | None = None
    torso_endpoints: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NormalizerKind(self.kind))


@dataclass(frozen=True)
class OksConstants:
    """Per-keypoint falloff constants of the OKS kernel.

    The kernel is exp(-d^2 / (2 * area * kappa^2)); the COCO evaluator's
    per-keypoint sigmas correspond to kappa = 2 * sigma under this
    parameterization, and the bundled coco17 profile ships them that way.
    """

    kappas: tuple[float, ...]

    def __post_init__(self):
        kappas = tuple(float(k) for k in self.kappas)
        if not kappas or any(k <= 0 for k in kappas):
            raise DataError("OKS constants must be positive and non-empty")
        object.__setattr__(self, "kappas", kappas)

    @property
    def k(self) -> int:
        return len(self.kappas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.kappas, dtype=np.float64)


@dataclass(frozen=True)
class PckResult:
    """Overall PCK plus a per-keypoint-index breakdown.

    per_keypoint[i] is the fraction of correct keypoints among labeled
    keypoints at index i (NaN when no instance labels that index); overall
    pools every labeled keypoint regardless of index.
    """

    overall: float
    per_keypoint: tuple[float, ...]
    labeled_per_keypoint: tuple[int, ...]

    @property
    def n_labeled(self) -> int:
        return int(sum(self.labeled_per_keypoint))


@dataclass(frozen=True)
class Detection:
    """A scored pose prediction for one instance."""

    pose: DecodedPose
    score: float


@dataclass(frozen=True)
class OksApResult:
    ap: float
    ap50: float | None
    ap75: float | None
    ar: float
    thresholds: tuple[float, ...]
    per_threshold_ap: tuple[float, ...]
    per_threshold_recall: tuple[float, ...]


def _coords_of(prediction) -> np.ndarray:
    if isinstance(prediction, DecodedPose):
        return prediction.coords
    coords = np.asarray(prediction, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ContractError(f"prediction coords must be (K, 2), got {coords.shape}")
    return coords


def resolve_normalizer(instance: PoseInstance, spec: NormalizerSpec) -> float:
    """Normalizing length in pixels for one instance.

    torso: distance between the two configured torso keypoints.
    head: HEAD_DIAGONAL_FRACTION times the head-box diagonal.
    explicit: the stored value, passed through.
    Missing metadata raises DataError.
    """
    if not isinstance(spec, NormalizerSpec):
        spec = NormalizerSpec(kind=spec)
    if spec.kind is NormalizerKind.EXPLICIT:
        if spec.value is None:
            raise DataError("explicit normalizer requested but no value set")
        return float(spec.value)
    if spec.kind is NormalizerKind.HEAD:
        box = instance.norm_meta.head_box
        if box is None:
            raise DataError("head normalizer requested but instance has no head_box")
        x1, y1, x2, y2 = box
        return HEAD_DIAGONAL_FRACTION * float(np.hypot(x2 - x1, y2 - y1))
    endpoints = spec.torso_endpoints or instance.norm_meta.torso_endpoints
    if endpoints is None:
        raise DataError("torso normalizer requested but no endpoints configured")
    i, j = endpoints
    if not (0 <= i < instance.k and 0 <= j < instance.k):
        raise DataError(f"torso endpoints {endpoints} out of range for K={instance.k}")
    a, b = instance.keypoints[i], instance.keypoints[j]
    return float(np.hypot(a.x - b.x, a.y - b.y))


def pck(
    predictions: list,
    ground_truths: list[PoseInstance],
    normalizers: list[float],
    alpha: float,
) -> PckResult:
    """Percentage of correct keypoints at threshold alpha * normalizer.

    A keypoint is correct when its Euclidean error is <= alpha * normalizer
    for its instance. Unlabeled ground-truth keypoints are excluded.
    """
    if not (len(predictions) == len(ground_truths) == len(normalizers)):
        raise ContractError(
            f"length mismatch: {len(predictions)} predictions, "
            f"{len(ground_truths)} ground truths, {len(normalizers)} normalizers"
        )
    if not ground_truths:
        raise ContractError("pck needs at least one instance")
    k = ground_truths[0].k
    correct = np.zeros(k, dtype=np.int64)
    labeled = np.zeros(k, dtype=np.int64)
    for idx, (pred, gt, norm) in enumerate(
        zip(predictions, ground_truths, normalizers)
    ):
        if norm is None or norm <= 0:
            raise DataError(f"instance {idx} has non-positive normalizer {norm}")
        if gt.k != k:
            raise ContractError(f"instance {idx} has K={gt.k}, expected {k}")
        coords = _coords_of(pred)
        if coords.shape[0] != k:
            raise ContractError(f"prediction {idx} has K={coords.shape[0]}, expected {k}")
        err = np.linalg.norm(coords - gt.coords_array(), axis=1)
        mask = gt.labeled_mask()
        labeled += mask
        correct += mask & (err <= alpha * norm)
    with np.errstate(invalid="ignore"):
        per_kp = np.where(labeled > 0, correct / np.maximum(labeled, 1), np.nan)
    total = int(labeled.sum())
    overall = float(correct.sum() / total) if total else float("nan")
    return PckResult(
        overall=overall,
        per_keypoint=tuple(float(v) for v in per_kp),
        labeled_per_keypoint=tuple(int(v) for v in labeled),
    )


def oks(prediction, gt: PoseInstance, constants: OksConstants) -> float:
    """Object keypoint similarity between one prediction and one instance.

    Mean over labeled keypoints of exp(-d^2 / (2 * area * kappa^2)).
    """
    area = gt.norm_meta.area
    if area is None or area <= 0:
        raise DataError("OKS needs a positive instance area")
    if constants.k != gt.k:
        raise ContractError(f"OKS constants K={constants.k} but instance K={gt.k}")
    mask = gt.labeled_mask()
    if not mask.any():
        raise DataError("OKS needs at least one labeled keypoint")
    coords = _coords_of(prediction)
    d2 = np.sum((coords - gt.coords_array()) ** 2, axis=1)
    kernel = np.exp(-d2 / (2.0 * area * constants.as_array() ** 2))
    return float(kernel[mask].mean())


def _detection_order(dets: list[Detection]) -> list[int]:
    # Deterministic under input shuffles: score descending, then coordinate
    # content as the tiebreaker.
    def key(i: int):
        coords = dets[i].pose.coords
        return (-dets[i].score, tuple(coords.ravel().tolist()))

    return sorted(range(len(dets)), key=key)


def oks_ap(
    detections: list[list[Detection]],
    ground_truths: list[list[PoseInstance]],
    constants: OksConstants,
    thresholds: tuple[float, ...] = DEFAULT_OKS_THRESHOLDS,
) -> OksApResult:
    """OKS-thresholded average precision and recall over a set of images.

    Per threshold, detections are matched greedily in descending score order
    to the unmatched ground truth with the highest OKS at or above the
    threshold. The precision-recall curve is integrated with 101-point
    interpolation; AP averages the interpolated precisions over thresholds,
    AR averages the final recall. Ground truths without labeled keypoints
    are excluded; detections on images without ground truth count as false
    positives.
    """
    if len(detections) != len(ground_truths):
        raise ContractError(
            f"image count mismatch: {len(detections)} vs {len(ground_truths)}"
        )
    thresholds = tuple(float(t) for t in thresholds)
    n_thr = len(thresholds)

    # Per-image OKS matrices against the kept (labeled) ground truths.
    images = []
    npig = 0
    for dets, gts in zip(detections, ground_truths):
        kept = [g for g in gts if g.labeled_mask().any()]
        npig += len(kept)
        order = _detection_order(dets)
        matrix = np.zeros((len(order), len(kept)), dtype=np.float64)
        for row, di in enumerate(order):
            for col, gt in enumerate(kept):
                matrix[row, col] = oks(dets[di].pose, gt, constants)
        scores = np.array([dets[i].score for i in order], dtype=np.float64)
        images.append((scores, matrix, len(kept)))

    # Global detection order: score desc, then image index, then in-image rank.
    flat = []
    for img_idx, (scores, _, _) in enumerate(images):
        for rank, score in enumerate(scores):
            flat.append((-score, img_idx, rank))
    flat.sort()

    per_ap = []
    per_recall = []
    for t in thresholds:
        tp_flags = {}
        for img_idx, (scores, matrix, n_gt) in enumerate(images):
            taken = np.zeros(n_gt, dtype=bool)
            for rank in range(len(scores)):
                best, best_oks = -1, -np.inf
                for g in range(n_gt):
                    if taken[g]:
                        continue
                    val = matrix[rank, g]
                    # >= t admits the boundary; ties keep the first (lowest) index
                    if val >= t and val > best_oks:
                        best, best_oks = g, val
                if best >= 0:
                    taken[best] = True
                    tp_flags[(img_idx, rank)] = True
        if npig == 0:
            per_ap.append(0.0)
            per_recall.append(0.0)
            continue
        tp = np.array(
            [tp_flags.get((img, rank), False) for _, img, rank in flat], dtype=np.float64
        )
        if tp.size == 0:
            per_ap.append(0.0)
            per_recall.append(0.0)
            continue
        cum_tp = np.cumsum(tp)
        recall = cum_tp / npig
        precision = cum_tp / np.arange(1, tp.size + 1)
        # Envelope: precision at each point is the best achievable to its right.
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        q = np.zeros_like(_RECALL_POINTS)
        inds = np.searchsorted(recall, _RECALL_POINTS, side="left")
        inside = inds < precision.size
        q[inside] = precision[inds[inside]]
        per_ap.append(float(q.mean()))
        per_recall.append(float(recall[-1]))

    def at(value: float) -> float | None:
        for t, ap_t in zip(thresholds, per_ap):
            if abs(t - value) < 1e-9:
                return ap_t
        return None

    return OksApResult(
        ap=float(np.mean(per_ap)) if n_thr else 0.0,
        ap50=at(0.50),
        ap75=at(0.75),
        ar=float(np.mean(per_recall)) if n_thr else 0.0,
        thresholds=thresholds,
        per_threshold_ap=tuple(per_ap),
        per_threshold_recall=tuple(per_recall),
    )
