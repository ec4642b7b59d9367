"""Ranking metrics and the detection-quality scorers.

ROC AUC uses the Mann-Whitney rank-sum with midrank tie correction, so tied
scores contribute the exact diagonal-segment area; the returned curve's
trapezoid integral agrees with the rank formula. PR AUC is average precision
with step interpolation over grouped thresholds. mAP matches predictions to
ground truth greedily in score order by center distance (nearest unmatched
first) and averages over classes and distance thresholds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .synthbev import BevBox
from .validation import ConfigError, DataError, as_float_array


@dataclass(frozen=True)
class CurveReport:
    """Curve points [n, 2] (x weakly increasing) plus the scalar area."""

    points: np.ndarray
    auc: float

    def __post_init__(self):
        pts = as_float_array(self.points, "points")
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError("points must have shape [n, 2]")
        if np.any(np.diff(pts[:, 0]) < 0):
            raise DataError("curve x coordinates must be weakly increasing")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "auc", float(self.auc))

    def write_csv(self, path, header=("x", "y")):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for x, y in self.points:
                writer.writerow([repr(float(x)), repr(float(y))])

    def to_dict(self):
        return {"auc": self.auc, "points": [[float(x), float(y)] for x, y in self.points]}


def _check_scores_labels(scores, labels):
    scores = as_float_array(scores, "scores").reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DataError("scores and labels must have equal length")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores contain non-finite entries")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must be binary")
    return scores, labels.astype(float)


def _midranks(scores):
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> CurveReport:
    """ROC curve and AUC; higher scores should indicate the positive class.

    Requires at least one positive and one negative label. Ties are grouped:
    each distinct score is one operating point, so plateaus appear as single
    diagonal segments whose trapezoid area reproduces the midrank formula.
    """
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"roc_auc needs both classes, got {n_pos} positives / {n_neg} negatives"
        )

    ranks = _midranks(scores)
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundaries, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[idx]
    fp = (idx + 1) - tp
    points = np.concatenate(
        [[[0.0, 0.0]], np.stack([fp / n_neg, tp / n_pos], axis=1)]
    )
    return CurveReport(points=points, auc=float(auc))


def pr_auc(scores, labels) -> CurveReport:
    """Precision-recall curve and average precision (step interpolation).

    AP = sum_i (R_i - R_{i-1}) P_i over distinct-score thresholds, which
    equals the precision-at-each-positive-rank formulation with ties grouped.
    Requires at least one positive.
    """
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("pr_auc needs at least one positive label")

    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundaries, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[idx]
    precision = tp / (idx + 1.0)
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    points = np.concatenate([[[0.0, 1.0]], np.stack([recall, precision], axis=1)])
    return CurveReport(points=points, auc=ap)


def iou(a: BevBox, b: BevBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _match_class_threshold(pred, gt_centers_by_scene, threshold):
    """Greedy center-distance matching in global score order.

    pred: list of (score, scene_idx, cx, cy) already sorted by score desc.
    Returns the TP/FP labels in rank order.
    """
    matched = {i: np.zeros(len(v), dtype=bool) for i, v in gt_centers_by_scene.items()}
    hits = np.zeros(len(pred), dtype=bool)
    for rank, (_, scene_idx, cx, cy) in enumerate(pred):
        centers = gt_centers_by_scene.get(scene_idx)
        if centers is None or len(centers) == 0:
            continue
        taken = matched[scene_idx]
        d = np.hypot(centers[:, 0] - cx, centers[:, 1] - cy)
        d[taken] = np.inf
        best = int(np.argmin(d))
        if d[best] <= threshold:
            taken[best] = True
            hits[rank] = True
    return hits


def _average_precision(hits, n_gt):
    if n_gt == 0:
        return None
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(np.sum(precision[hits]) / n_gt)


@dataclass(frozen=True)
class EvalReport:
    """mAP plus its (class_id, threshold) -> AP breakdown."""

    mean_ap: float
    per_class_threshold: dict
    n_predictions: int
    n_ground_truth: int

    def to_dict(self):
        return {
            "map": self.mean_ap,
            "per_class_threshold": {
                f"class_{c}_d_{t:g}": ap
                for (c, t), ap in sorted(self.per_class_threshold.items())
            },
            "n_predictions": self.n_predictions,
            "n_ground_truth": self.n_ground_truth,
        }


def map_center_distance(pred_by_scene, gt_by_scene,
                        thresholds=(0.5, 1.0, 2.0, 4.0)) -> EvalReport:
    """Center-distance mAP over per-scene box lists.

    Predictions need scores; matching is greedy by global score order, each
    GT box consumed at most once, nearest unmatched GT first. Classes with no
    GT anywhere are skipped in the class mean; no GT at all yields mAP 0.0.
    """
    if len(pred_by_scene) != len(gt_by_scene):
        raise DataError("pred_by_scene and gt_by_scene must align per scene")
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(t <= 0 for t in thresholds):
        raise ConfigError("thresholds must be positive")

    classes = sorted(
        {b.class_id for boxes in gt_by_scene for b in boxes}
        | {b.class_id for boxes in pred_by_scene for b in boxes}
    )
    n_predictions = sum(len(boxes) for boxes in pred_by_scene)
    n_ground_truth = sum(len(boxes) for boxes in gt_by_scene)
    per_class_threshold = {}
    for class_id in classes:
        n_gt = sum(
            1 for boxes in gt_by_scene for b in boxes if b.class_id == class_id
        )
        if n_gt == 0:
            continue
        gt_centers_by_scene = {
            i: np.array(
                [[b.cx, b.cy] for b in boxes if b.class_id == class_id]
            ).reshape(-1, 2)
            for i, boxes in enumerate(gt_by_scene)
        }
        pred = []
        for i, boxes in enumerate(pred_by_scene):
            for b in boxes:
                if b.class_id != class_id:
                    continue
                if b.score is None:
                    raise DataError("predicted boxes must carry scores for mAP")
                pred.append((float(b.score), i, b.cx, b.cy))
        pred.sort(key=lambda t: -t[0])
        for threshold in thresholds:
            hits = _match_class_threshold(pred, gt_centers_by_scene, threshold)
            per_class_threshold[(class_id, threshold)] = _average_precision(
                hits, n_gt
            )

    mean_ap = (
        float(np.mean(list(per_class_threshold.values())))
        if per_class_threshold else 0.0
    )
    return EvalReport(
        mean_ap=mean_ap,
        per_class_threshold=per_class_threshold,
        n_predictions=int(n_predictions),
        n_ground_truth=int(n_ground_truth),
    )
