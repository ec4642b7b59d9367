"""Ranking metrics against hand-computed values."""

import numpy as np
import pytest

from edlbev.metrics import (
    CurveReport,
    EvalReport,
    iou,
    map_center_distance,
    pr_auc,
    roc_auc,
)
from edlbev.synthbev import BevBox
from edlbev.validation import ConfigError, DataError


def _box(cx, cy, w=2.0, h=2.0, class_id=0, score=None):
    return BevBox(cx=cx, cy=cy, w=w, h=h, class_id=class_id, score=score,
                  provenance="predicted" if score is not None else "ground-truth")


# ------------------------------------------------------------------ ROC AUC


def test_roc_auc_hand_case():
    # positives (0.35, 0.8) vs negatives (0.1, 0.4): 3 of 4 pairs ordered
    report = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert report.auc == pytest.approx(0.75, abs=1e-12)


def test_roc_auc_perfect_and_inverted():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0


def test_roc_auc_all_tied_is_half():
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]).auc == pytest.approx(0.5)


def test_roc_auc_midrank_ties():
    # pos scores (1,), negs (1, 0): pair (1 vs 1) counts half, (1 vs 0) full
    report = roc_auc([1.0, 1.0, 0.0], [1, 0, 0])
    assert report.auc == pytest.approx(0.75, abs=1e-12)


def test_roc_curve_integrates_to_auc():
    rng = np.random.default_rng(55)
    scores = np.round(rng.random(200), 2)  # force plenty of ties
    labels = (rng.random(200) < 0.4).astype(int)
    report = roc_auc(scores, labels)
    x, y = report.points[:, 0], report.points[:, 1]
    trapezoid = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    assert trapezoid == pytest.approx(report.auc, abs=1e-12)
    assert x[0] == 0.0 and y[0] == 0.0
    assert x[-1] == 1.0 and y[-1] == 1.0


def test_roc_auc_needs_both_classes():
    with pytest.raises(DataError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        roc_auc([0.1, 0.2], [0, 0])
    with pytest.raises(DataError):
        roc_auc([0.1, np.nan], [0, 1])
    with pytest.raises(DataError):
        roc_auc([0.1, 0.2], [0, 2])


# ------------------------------------------------------------------- PR AUC


def test_pr_auc_hand_case():
    # ranks: 0.9 (pos, P=1, R=1/2), 0.8 (neg), 0.7 (pos, P=2/3, R=1)
    report = pr_auc([0.9, 0.8, 0.7], [1, 0, 1])
    assert report.auc == pytest.approx(0.5 + 1.0 / 3.0, abs=1e-12)


def test_pr_auc_perfect():
    assert pr_auc([0.9, 0.8, 0.1], [1, 1, 0]).auc == pytest.approx(1.0)


def test_pr_auc_needs_positives():
    with pytest.raises(DataError):
        pr_auc([0.5, 0.6], [0, 0])


def test_pr_auc_prevalence_floor():
    # scoring at chance, AP approaches the positive rate
    rng = np.random.default_rng(56)
    labels = (rng.random(2000) < 0.3).astype(int)
    report = pr_auc(rng.random(2000), labels)
    assert 0.2 < report.auc < 0.4


# -------------------------------------------------------------- box overlap


def test_iou_identity_and_disjoint():
    a = _box(5.0, 5.0, 3.0, 3.0)
    assert iou(a, a) == 1.0
    b = _box(20.0, 20.0, 3.0, 3.0)
    assert iou(a, b) == 0.0


def test_iou_hand_case():
    # corner form [0,0,2,2] vs [1,0,3,2]: intersection 2, union 6
    a = _box(1.0, 1.0, 2.0, 2.0)
    b = _box(2.0, 1.0, 2.0, 2.0)
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou(b, a) == pytest.approx(1.0 / 3.0, abs=1e-12)


# --------------------------------------------------------------------- mAP


def test_map_single_hit():
    gt = [[_box(5.0, 5.0)]]
    pred = [[_box(5.2, 5.0, score=0.9)]]
    report = map_center_distance(pred, gt, thresholds=(0.5, 1.0))
    assert report.mean_ap == pytest.approx(1.0)
    assert report.n_predictions == 1
    assert report.n_ground_truth == 1


def test_map_confident_false_positive_halves_ap():
    gt = [[_box(5.0, 5.0)]]
    pred = [[_box(5.2, 5.0, score=0.6), _box(15.0, 15.0, score=0.95)]]
    report = map_center_distance(pred, gt, thresholds=(1.0,))
    # the hit arrives at rank 2: AP = precision@2 = 1/2
    assert report.mean_ap == pytest.approx(0.5)


def test_map_each_gt_matched_once():
    gt = [[_box(5.0, 5.0)]]
    pred = [[_box(5.1, 5.0, score=0.9), _box(5.2, 5.0, score=0.8)]]
    report = map_center_distance(pred, gt, thresholds=(1.0,))
    # second prediction finds its only GT taken: one TP, one FP
    assert report.mean_ap == pytest.approx(1.0)
    gt2 = [[_box(5.0, 5.0), _box(5.4, 5.0)]]
    report2 = map_center_distance(pred, gt2, thresholds=(1.0,))
    # nearest-unmatched: rank 1 takes (5.0), rank 2 takes (5.4)
    assert report2.mean_ap == pytest.approx(1.0)


def test_map_greedy_takes_nearest_unmatched():
    gt = [[_box(5.0, 5.0), _box(6.0, 5.0)]]
    pred = [[_box(5.1, 5.0, score=0.9), _box(5.0, 5.0, score=0.8)]]
    report = map_center_distance(pred, gt, thresholds=(2.0,))
    # rank 1 grabs the 5.0 GT (nearest), rank 2 must settle for 6.0
    assert report.mean_ap == pytest.approx(1.0)


def test_map_classes_without_gt_are_skipped():
    gt = [[_box(5.0, 5.0, class_id=0)]]
    pred = [[_box(5.0, 5.0, class_id=0, score=0.9),
             _box(9.0, 9.0, class_id=1, score=0.9)]]
    report = map_center_distance(pred, gt, thresholds=(1.0,))
    # class 1 has no GT anywhere: excluded from the mean, not scored zero
    assert report.mean_ap == pytest.approx(1.0)
    assert all(c == 0 for c, _ in report.per_class_threshold)


def test_map_zero_when_no_gt():
    report = map_center_distance([[_box(1, 1, score=0.5)]], [[]])
    assert report.mean_ap == 0.0


def test_map_averages_over_thresholds():
    gt = [[_box(5.0, 5.0)]]
    pred = [[_box(6.5, 5.0, score=0.9)]]  # 1.5 cells off
    report = map_center_distance(pred, gt, thresholds=(1.0, 2.0))
    assert report.per_class_threshold[(0, 1.0)] == 0.0
    assert report.per_class_threshold[(0, 2.0)] == 1.0
    assert report.mean_ap == pytest.approx(0.5)


def test_map_input_validation():
    with pytest.raises(DataError):
        map_center_distance([[]], [[], []])  # scene count mismatch
    with pytest.raises(DataError):
        map_center_distance([[_box(1, 1)]], [[_box(1, 1)]])  # scoreless pred
    with pytest.raises(ConfigError):
        map_center_distance([[]], [[]], thresholds=())
    with pytest.raises(ConfigError):
        map_center_distance([[]], [[]], thresholds=(0.0,))


def test_eval_report_dict_keys():
    gt = [[_box(5.0, 5.0)]]
    pred = [[_box(5.0, 5.0, score=0.9)]]
    doc = map_center_distance(pred, gt, thresholds=(0.5, 2.0)).to_dict()
    assert doc["map"] == pytest.approx(1.0)
    assert set(doc["per_class_threshold"]) == {"class_0_d_0.5", "class_0_d_2"}


# ------------------------------------------------------------- CurveReport


def test_curve_report_validation_and_csv(tmp_path):
    with pytest.raises(DataError):
        CurveReport(points=np.array([[1.0, 0.0], [0.5, 1.0]]), auc=0.5)
    with pytest.raises(DataError):
        CurveReport(points=np.zeros((2, 3)), auc=0.5)
    report = roc_auc([0.1, 0.9], [0, 1])
    path = tmp_path / "curve.csv"
    report.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y"
    assert len(lines) == 1 + report.points.shape[0]
    doc = report.to_dict()
    assert doc["auc"] == 1.0
    assert doc["points"][0] == [0.0, 0.0]
