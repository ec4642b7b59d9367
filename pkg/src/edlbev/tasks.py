"""The three downstream uncertainty tasks on grid worlds.

Scene scoring averages the per-cell uncertainty map into one number per scene
(shift shows up as elevated aggregate uncertainty). Box scoring averages the
map over a predicted box's footprint per class and takes the minimum across
classes; boxes whose best same-class IoU against ground truth falls under tau
count as erroneous. The missed-object path gates cells whose heatmap
probability is below a small threshold, scores them with an auxiliary
evidential head over the concatenated per-cell vector [features, p, u], and
checks the top-k picks against ground-truth centers the detector missed.

`run_*_experiment` functions are the end-to-end per-seed procedures shared by
the CLI and the acceptance suite.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .heads import HeadParameters, head_forward
from .evidential import evidence_from_logits
from .metrics import iou, pr_auc, roc_auc
from .synthbev import BevBox, SyntheticScene, WorldConfig, generate_split
from .validation import (
    ConfigError,
    DataError,
    check_probability_map,
    check_tensor3d,
    check_unit_interval,
)


@dataclass(frozen=True)
class TaskConfig:
    """Downstream-task constants; defaults are the reference settings."""

    decode_threshold: float = 0.3
    iou_tau: float = 0.3
    gate: float = 0.05
    top_k: int = 15
    radii: tuple = (2.0, 4.0)
    map_thresholds: tuple = (0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        check_unit_interval(self.decode_threshold, "decode_threshold", open_ends=True)
        check_unit_interval(self.iou_tau, "iou_tau")
        check_unit_interval(self.gate, "gate", open_ends=True)
        if int(self.top_k) < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k!r}")
        radii = tuple(float(r) for r in self.radii)
        if not radii or any(r <= 0 for r in radii):
            raise ConfigError("radii must be positive")
        thresholds = tuple(float(t) for t in self.map_thresholds)
        if not thresholds or any(t <= 0 for t in thresholds):
            raise ConfigError("map_thresholds must be positive")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "map_thresholds", thresholds)
        object.__setattr__(self, "top_k", int(self.top_k))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad task config: {exc}") from exc


@dataclass(frozen=True)
class ScoredBox:
    box: BevBox
    best_iou: float
    erroneous: bool
    u_b: float | None = None


@dataclass(frozen=True)
class MissCandidate:
    row: int
    col: int
    class_id: int
    p_miss: float
    matched: bool = False


@dataclass(frozen=True)
class MissSelection:
    precision: float
    recall: float
    f1: float
    matches: tuple  # MissCandidate per selected candidate, matched flag set


def scene_uncertainty(u) -> float:
    """Arithmetic mean of the uncertainty map over all C*H*D entries."""
    u = check_tensor3d(u, "uncertainty map")
    return float(np.mean(u))


# Offsets that precede a cell in raster order get a strict comparison, the
# rest a weak one, so each plateau yields exactly one peak at its smallest
# (row, col) index.
_EARLIER = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
_LATER = ((0, 1), (1, -1), (1, 0), (1, 1))


def decode_boxes(p, threshold, class_sizes):
    """Boxes from 3x3 local maxima of the heatmap above `threshold`.

    Each class channel is scanned independently; a peak at (r, c) becomes a
    box centered there with that class's default (square) size and the peak
    probability as score.
    """
    p = check_probability_map(p, "p")
    threshold = check_unit_interval(threshold, "threshold", open_ends=True)
    c_dim, h, d = p.shape
    sizes = tuple(float(s) for s in class_sizes)
    if len(sizes) != c_dim:
        raise ConfigError(
            f"class_sizes needs {c_dim} entries, got {len(sizes)}"
        )
    if any(s <= 0 for s in sizes):
        raise ConfigError("class_sizes must be positive")

    padded = np.full((c_dim, h + 2, d + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = p
    is_peak = p > threshold
    for dr, dc in _EARLIER:
        is_peak &= p > padded[:, 1 + dr:1 + dr + h, 1 + dc:1 + dc + d]
    for dr, dc in _LATER:
        is_peak &= p >= padded[:, 1 + dr:1 + dr + h, 1 + dc:1 + dc + d]

    boxes = []
    for k, r, c in np.argwhere(is_peak):
        boxes.append(
            BevBox(
                cx=float(r), cy=float(c), w=sizes[k], h=sizes[k],
                class_id=int(k), score=float(p[k, r, c]),
                provenance="predicted",
            )
        )
    return boxes


def _footprint_slices(box: BevBox, h, d):
    r0 = max(0, int(np.ceil(box.cx - box.w / 2.0)))
    r1 = min(h - 1, int(np.floor(box.cx + box.w / 2.0)))
    c0 = max(0, int(np.ceil(box.cy - box.h / 2.0)))
    c1 = min(d - 1, int(np.floor(box.cy + box.h / 2.0)))
    if r0 > r1 or c0 > c1:
        raise DataError(
            f"box footprint is empty on a {h}x{d} grid "
            f"(center ({box.cx}, {box.cy}), size ({box.w}, {box.h}))"
        )
    return slice(r0, r1 + 1), slice(c0, c1 + 1)


def box_uncertainty(u, box: BevBox) -> float:
    """Footprint-mean uncertainty per class, then the minimum over classes."""
    u = check_tensor3d(u, "uncertainty map")
    rows, cols = _footprint_slices(box, u.shape[1], u.shape[2])
    per_class = u[:, rows, cols].mean(axis=(1, 2))
    return float(per_class.min())


def label_box_errors(pred, gt, tau, u_map=None):
    """ScoredBox per prediction: best same-class IoU, erroneous if < tau."""
    tau = check_unit_interval(tau, "tau")
    if u_map is not None:
        u_map = check_tensor3d(u_map, "uncertainty map")
    out = []
    for box in pred:
        best = 0.0
        for g in gt:
            if g.class_id == box.class_id:
                best = max(best, iou(box, g))
        out.append(
            ScoredBox(
                box=box,
                best_iou=best,
                erroneous=bool(best < tau),
                u_b=box_uncertainty(u_map, box) if u_map is not None else None,
            )
        )
    return out


def find_missed_gt(pred, gt):
    """GT boxes no same-class prediction overlaps at all (IoU > 0)."""
    missed = []
    for g in gt:
        if not any(
            b.class_id == g.class_id and iou(b, g) > 0.0 for b in pred
        ):
            missed.append(g)
    return missed


def miss_candidates(p, gate):
    """(row, col, class_id) for every entry with p < gate, raster order."""
    p = check_probability_map(p, "p")
    gate = check_unit_interval(gate, "gate", open_ends=True)
    hits = np.argwhere(np.transpose(p, (1, 2, 0)) < gate)
    return [(int(r), int(c), int(k)) for r, c, k in hits]


def miss_features(features, p, u):
    """Concatenate [features, p channels, u channels] along the channel axis.
    The order is part of the contract; the miss head's in_dim is F + 2C."""
    features = check_tensor3d(features, "features")
    p = check_tensor3d(p, "p")
    u = check_tensor3d(u, "u")
    if p.shape != u.shape or p.shape[1:] != features.shape[1:]:
        raise DataError("features, p, u disagree on grid shape")
    return np.concatenate([features, p, u], axis=0)


def miss_head_forward(m: HeadParameters, features, p, u):
    """p_miss map from the auxiliary evidential head over [e, p, u]."""
    stacked = miss_features(features, p, u)
    if m.in_dim != stacked.shape[0]:
        raise DataError(
            f"miss head expects in_dim {stacked.shape[0]} (= F + 2C), "
            f"has {m.in_dim}"
        )
    e_a, e_b = head_forward(m, stacked)
    grid = evidence_from_logits(e_a, e_b)
    return grid.alpha / (grid.alpha + grid.beta)


def select_missed(score_map, candidates, k, missed_gt, radius) -> MissSelection:
    """Pick the top-k candidates by score and match them to missed GT centers.

    Ties break toward smaller (row, col, class). A selected candidate is a
    true positive when an unmatched missed-GT center lies within Euclidean
    distance `radius`; matching is greedy in descending score with the
    nearest center taken first, each GT consumed at most once. Precision is
    over the selected set, recall over the missed-GT set; an empty missed set
    reports recall = 1 by convention (and precision 0 as soon as anything is
    selected), F1 follows.
    """
    score_map = check_tensor3d(score_map, "score map")
    if int(k) < 1:
        raise ConfigError(f"k must be >= 1, got {k!r}")
    if radius <= 0:
        raise ConfigError(f"radius must be > 0, got {radius!r}")

    ranked = sorted(
        candidates,
        key=lambda rc: (-float(score_map[rc[2], rc[0], rc[1]]), rc[0], rc[1], rc[2]),
    )[: int(k)]

    centers = np.array([[g.cx, g.cy] for g in missed_gt]).reshape(-1, 2)
    taken = np.zeros(len(missed_gt), dtype=bool)
    matches = []
    tp = 0
    for r, c, cls in ranked:
        matched = False
        if centers.size:
            dist = np.hypot(centers[:, 0] - r, centers[:, 1] - c)
            dist[taken] = np.inf
            best = int(np.argmin(dist))
            if dist[best] <= radius:
                taken[best] = True
                matched = True
                tp += 1
        matches.append(
            MissCandidate(
                row=r, col=c, class_id=cls,
                p_miss=float(score_map[cls, r, c]), matched=matched,
            )
        )

    n_sel = len(ranked)
    n_missed = len(missed_gt)
    precision = tp / n_sel if n_sel else 1.0
    recall = tp / n_missed if n_missed else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MissSelection(
        precision=float(precision), recall=float(recall), f1=float(f1),
        matches=tuple(matches),
    )


# ---------------------------------------------------------------------------
# End-to-end experiment runners (one seed each).


def _scene_scores(estimator, scenes):
    return np.array(
        [scene_uncertainty(estimator.predict_uncertainty(s.features)) for s in scenes]
    )


def run_ood_experiment(world: WorldConfig, task: TaskConfig, seed,
                       n_train=1000, n_test_id=200, n_test_ood=200,
                       estimators=None, include_ensemble=False) -> dict:
    """Train on in-distribution scenes, score held-out ID vs OOD scenes by
    mean map uncertainty, and report ROC/PR AUC per method (OOD = positive).

    Also reports the ROC AUC of a bare scene-mean-feature statistic: the
    world guarantees that this shortcut stays well under the trained scores.
    """
    from .estimators import (
        DeepEnsembleBevHead,
        EvidentialBevHead,
        GaussianFocalBevHead,
    )

    world = dataclasses.replace(world, seed=seed)
    train = generate_split(world, "train", "in-distribution", n_train)
    test_id = generate_split(world, "test", "in-distribution", n_test_id)
    test_ood = generate_split(world, "test", "ood", n_test_ood)
    test = test_id + test_ood
    labels = np.array([0] * len(test_id) + [1] * len(test_ood))

    if estimators is None:
        estimators = {
            "edl": EvidentialBevHead(random_state=seed),
            "entropy": GaussianFocalBevHead(random_state=seed),
        }
        if include_ensemble:
            estimators["ensemble"] = DeepEnsembleBevHead(random_state=seed)

    report = {"seed": int(seed), "n_test_id": len(test_id), "n_test_ood": len(test_ood)}
    per_scene = []
    for name, est in estimators.items():
        est.fit(train)
        scores = _scene_scores(est, test)
        report[f"{name}_roc_auc"] = roc_auc(scores, labels).auc
        report[f"{name}_pr_auc"] = pr_auc(scores, labels).auc
        per_scene.append((name, scores))

    feat_stat = np.array([float(s.features.mean()) for s in test])
    report["feature_mean_roc_auc"] = roc_auc(feat_stat, labels).auc
    report["per_scene"] = {
        "scene_ids": [s.scene_id for s in test],
        "domains": [s.domain for s in test],
        "labels": labels.tolist(),
        "scores": {name: scores.tolist() for name, scores in per_scene},
    }
    return report


def _boxes_and_errors(est, scenes, task: TaskConfig, class_sizes):
    """Decode each scene, score boxes with the estimator's own uncertainty
    map, label errors against GT. Returns flat (u_b, erroneous) arrays plus
    the per-scene scored boxes."""
    u_b, err, scored_by_scene = [], [], []
    for scene in scenes:
        p = est.predict_prob(scene.features)
        u = est.predict_uncertainty(scene.features)
        boxes = decode_boxes(p, task.decode_threshold, class_sizes)
        scored = label_box_errors(boxes, scene.objects, task.iou_tau, u_map=u)
        scored_by_scene.append(scored)
        for sb in scored:
            u_b.append(sb.u_b)
            err.append(1 if sb.erroneous else 0)
    return np.array(u_b), np.array(err), scored_by_scene


def run_box_experiment(world: WorldConfig, task: TaskConfig, seed,
                       n_train=1000, n_test=200, estimators=None) -> dict:
    """Rank each method's own decoded boxes by its uncertainty and measure
    how well that flags erroneous boxes (best same-class IoU < tau)."""
    from .estimators import EvidentialBevHead, GaussianFocalBevHead

    world = dataclasses.replace(world, seed=seed)
    train = generate_split(world, "train", "in-distribution", n_train)
    test = generate_split(world, "test", "in-distribution", n_test)

    if estimators is None:
        estimators = {
            "edl": EvidentialBevHead(random_state=seed),
            "entropy": GaussianFocalBevHead(random_state=seed),
        }

    report = {"seed": int(seed), "n_test": len(test)}
    details = {}
    for name, est in estimators.items():
        est.fit(train)
        u_b, err, scored = _boxes_and_errors(est, test, task, world.base_sizes)
        report[f"{name}_n_boxes"] = int(err.size)
        report[f"{name}_n_erroneous"] = int(err.sum())
        report[f"{name}_roc_auc"] = roc_auc(u_b, err).auc
        report[f"{name}_pr_auc"] = pr_auc(u_b, err).auc
        report[f"{name}_mean_ub_erroneous"] = float(u_b[err == 1].mean())
        report[f"{name}_mean_ub_accurate"] = float(u_b[err == 0].mean())
        details[name] = scored
    report["scored_boxes"] = details
    return report


def _micro_f1(totals):
    tp, n_sel, n_missed = totals
    precision = tp / n_sel if n_sel else 1.0
    recall = tp / n_missed if n_missed else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "selected": n_sel, "missed_gt": n_missed}


def run_missed_experiment(world: WorldConfig, task: TaskConfig, seed,
                          n_train=1000, n_test=200) -> dict:
    """Compare the miss head against random selection and raw-u ranking.

    Per test scene: decode boxes, collect the GT objects no same-class box
    overlaps, gate cells with p < gate, then pick top-k per method and match
    within each radius. Scores are micro-averaged over scenes.
    """
    from .estimators import EvidentialBevHead, MissedObjectHead

    world = dataclasses.replace(world, seed=seed)
    train = generate_split(world, "train", "in-distribution", n_train)
    test = generate_split(world, "test", "in-distribution", n_test)

    base = EvidentialBevHead(random_state=seed).fit(train)
    miss = MissedObjectHead(base_head=base, gate=task.gate,
                            random_state=seed).fit(train)
    rng = np.random.default_rng(seed + 90001)

    totals = {
        radius: {"miss_head": [0, 0, 0], "u_only": [0, 0, 0], "random": [0, 0, 0]}
        for radius in task.radii
    }
    n_candidates = 0
    for scene in test:
        p = base.predict_prob(scene.features)
        u = base.predict_uncertainty(scene.features)
        boxes = decode_boxes(p, task.decode_threshold, world.base_sizes)
        missed_gt = find_missed_gt(boxes, scene.objects)
        candidates = miss_candidates(p, task.gate)
        n_candidates += len(candidates)
        p_miss = miss.predict_miss(scene.features)
        random_map = rng.random(p.shape)
        for radius in task.radii:
            for name, score_map in (
                ("miss_head", p_miss), ("u_only", u), ("random", random_map),
            ):
                acc = totals[radius][name]
                acc[2] += len(missed_gt)
                if not candidates:
                    continue
                sel = select_missed(score_map, candidates, task.top_k,
                                    missed_gt, radius)
                acc[0] += sum(1 for m in sel.matches if m.matched)
                acc[1] += len(sel.matches)

    report = {"seed": int(seed), "n_test": len(test), "n_candidates": n_candidates}
    for radius in task.radii:
        report[f"radius_{radius:g}"] = {
            name: _micro_f1(acc) for name, acc in totals[radius].items()
        }
    return report
