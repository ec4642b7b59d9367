"""Auto-labeling with uncertainty-guided verification, plus two baselines.

All variants train the same evidential head; only the label sets differ.

- "Nk-R": train on the n ground-truth scenes, nothing else.
- "Nk-P": train on n, pseudo-label every remaining training scene with the
  decoded boxes, retrain from scratch on everything.
- "Nk-U": hold back a verification slice of s scenes, train on n - s,
  pseudo-label the rest, then spend an annotation budget in three passes
  (relabel the most uncertain whole scenes, replace the highest-uncertainty
  pseudo boxes, add labels at the most confident missed-object picks) before
  retraining from scratch.

The annotator is an oracle: every correction is a ground-truth lookup, so
verification can only move labels toward the truth and the label error count
is exactly measurable before and after. Budget accounting is denominated in
labels: a whole-scene relabel costs that scene's object count, a box
verification or a missed-label addition costs one label each.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .estimators import EvidentialBevHead, MissedObjectHead
from .metrics import iou, map_center_distance
from .synthbev import (
    BevBox,
    SyntheticScene,
    WorldConfig,
    generate_split,
    relabeled_view,
    write_json,
)
from .tasks import (
    TaskConfig,
    box_uncertainty,
    decode_boxes,
    miss_candidates,
    scene_uncertainty,
    select_missed,
)
from .validation import ConfigError, DataError

VARIANTS = ("Nk-R", "Nk-P", "Nk-U")


class BudgetClippedWarning(UserWarning):
    """Raised when a verification pass runs out of items or label budget
    before its per-category allowance is used up."""


@dataclass(frozen=True)
class BudgetPlan:
    """Annotation budget: a total label cap plus per-category item counts
    (scenes to relabel, boxes to verify, missed labels to add)."""

    total_labels: int
    per_category: tuple = (0, 0, 0)

    def __post_init__(self):
        total = int(self.total_labels)
        cats = tuple(int(c) for c in self.per_category)
        if total < 0:
            raise ConfigError(f"total_labels must be >= 0, got {total}")
        if len(cats) != 3 or any(c < 0 for c in cats):
            raise ConfigError(
                "per_category must be three nonnegative integers "
                "(scene_relabels, box_verifications, missed_labels)"
            )
        if sum(cats) > total:
            raise ConfigError(
                f"per_category sums to {sum(cats)}, exceeding "
                f"total_labels={total}"
            )
        object.__setattr__(self, "total_labels", total)
        object.__setattr__(self, "per_category", cats)

    @property
    def scene_relabels(self):
        return self.per_category[0]

    @property
    def box_verifications(self):
        return self.per_category[1]

    @property
    def missed_labels(self):
        return self.per_category[2]

    @classmethod
    def equal_split(cls, total_labels):
        """Split the total evenly across the three categories; leftover
        units go to scenes, then boxes, then missed."""
        total = int(total_labels)
        if total < 0:
            raise ConfigError(f"total_labels must be >= 0, got {total}")
        base, rem = divmod(total, 3)
        cats = [base, base, base]
        for i in range(rem):
            cats[i] += 1
        return cls(total_labels=total, per_category=tuple(cats))

    @classmethod
    def desk_default(cls):
        """30 scene relabels, 300 box verifications, 300 missed labels.
        The label cap covers the worst case of six objects per relabeled
        scene so the defaults never self-clip."""
        return cls(total_labels=30 * 6 + 300 + 300,
                   per_category=(30, 300, 300))

    @classmethod
    def zero(cls):
        return cls(total_labels=0, per_category=(0, 0, 0))

    def to_dict(self):
        return {"total_labels": self.total_labels,
                "per_category": list(self.per_category)}

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(total_labels=doc["total_labels"],
                       per_category=tuple(doc["per_category"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad budget plan: {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs shared by all pipeline variants."""

    task: TaskConfig = field(default_factory=TaskConfig)
    n_unlabeled: int = 100
    n_test: int = 200
    verify_slice: int | None = None  # default: min(10, n - 1)
    head: dict = field(default_factory=dict)  # estimator keyword overrides

    def __post_init__(self):
        if int(self.n_unlabeled) < 0:
            raise ConfigError("n_unlabeled must be >= 0")
        if int(self.n_test) < 1:
            raise ConfigError("n_test must be >= 1")
        if self.verify_slice is not None and int(self.verify_slice) < 1:
            raise ConfigError("verify_slice must be >= 1 when given")
        object.__setattr__(self, "n_unlabeled", int(self.n_unlabeled))
        object.__setattr__(self, "n_test", int(self.n_test))


@dataclass(frozen=True)
class PipelineRun:
    variant: str
    n_labeled_scenes: int
    seed: int
    metrics: dict
    spent: dict = field(default_factory=dict)
    label_errors: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PipelineData:
    labeled: tuple
    unlabeled: tuple
    test: tuple


def make_pipeline_data(world: WorldConfig, seed, n_labeled, cfg: PipelineConfig):
    """Generate the shared scene pools for one seed. All variants at the
    same seed see identical scenes."""
    world = dataclasses.replace(world, seed=int(seed))
    return PipelineData(
        labeled=tuple(generate_split(world, "train", "in-distribution",
                                     int(n_labeled))),
        unlabeled=tuple(generate_split(world, "unlabeled", "in-distribution",
                                       cfg.n_unlabeled)),
        test=tuple(generate_split(world, "test", "in-distribution",
                                  cfg.n_test)),
    )


def _fit_head(scenes, cfg: PipelineConfig, seed):
    est = EvidentialBevHead(random_state=int(seed), **cfg.head)
    return est.fit(list(scenes))


def _evaluate(est, test, world: WorldConfig, task: TaskConfig):
    pred, gt = [], []
    for scene in test:
        p = est.predict_prob(scene.features)
        pred.append(decode_boxes(p, task.decode_threshold, world.base_sizes))
        gt.append(list(scene.objects))
    return map_center_distance(pred, gt, thresholds=task.map_thresholds).to_dict()


def _pseudo_label(est, scenes, world: WorldConfig, task: TaskConfig):
    """Decoded boxes per scene, tagged as pseudo labels."""
    out = []
    for scene in scenes:
        p = est.predict_prob(scene.features)
        boxes = decode_boxes(p, task.decode_threshold, world.base_sizes)
        out.append([dataclasses.replace(b, provenance="pseudo") for b in boxes])
    return out


def count_label_errors(objects, gt, tau):
    """Spurious labels (best same-class IoU against GT < tau) plus missing
    GT (no same-class label reaches IoU >= tau). Exact, symmetric count."""
    spurious = 0
    for b in objects:
        best = max(
            (iou(b, g) for g in gt if g.class_id == b.class_id), default=0.0
        )
        if best < tau:
            spurious += 1
    missing = 0
    for g in gt:
        best = max(
            (iou(b, g) for b in objects if b.class_id == g.class_id),
            default=0.0,
        )
        if best < tau:
            missing += 1
    return spurious + missing


def _dataset_label_errors(label_sets, scenes, tau):
    return int(
        sum(count_label_errors(objs, s.objects, tau)
            for objs, s in zip(label_sets, scenes))
    )


class _Ledger:
    """Budget bookkeeping for one Nk-U run."""

    def __init__(self, plan: BudgetPlan):
        self.plan = plan
        self.labels_spent = 0
        self.items = {"scenes": 0, "boxes": 0, "missed": 0}
        self.labels = {"scenes": 0, "boxes": 0, "missed": 0}

    def allowance(self, category):
        return {
            "scenes": self.plan.scene_relabels,
            "boxes": self.plan.box_verifications,
            "missed": self.plan.missed_labels,
        }[category]

    def can_spend(self, category, cost):
        return (self.items[category] < self.allowance(category)
                and self.labels_spent + cost <= self.plan.total_labels)

    def spend(self, category, cost):
        self.items[category] += 1
        self.labels[category] += cost
        self.labels_spent += cost

    def warn_if_clipped(self, category, n_available):
        allowance = self.allowance(category)
        if self.items[category] >= allowance:
            return
        if self.items[category] >= n_available:
            reason = f"only {n_available} items were available"
        else:
            reason = (
                f"the total label cap ({self.plan.total_labels}) was reached"
            )
        warnings.warn(
            f"verification budget for {category!r} clipped at "
            f"{self.items[category]} of {allowance}: {reason}",
            BudgetClippedWarning,
            stacklevel=3,
        )

    def report(self):
        return {
            "labels_spent": self.labels_spent,
            "total_labels": self.plan.total_labels,
            "scenes_relabeled": self.items["scenes"],
            "boxes_verified": self.items["boxes"],
            "missed_added": self.items["missed"],
            "labels_by_category": dict(self.labels),
        }


def run_baseline_r(n, world: WorldConfig, cfg: PipelineConfig, seed=0,
                   data: PipelineData | None = None,
                   out_dir=None) -> PipelineRun:
    """Train on the n labeled scenes only and evaluate."""
    n = int(n)
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if data is None:
        data = make_pipeline_data(world, seed, n, cfg)
    if n > len(data.labeled):
        raise DataError(
            f"asked for {n} labeled scenes, pool has {len(data.labeled)}"
        )
    train = list(data.labeled[:n])
    est = _fit_head(train, cfg, seed)
    run = PipelineRun(
        variant="Nk-R", n_labeled_scenes=n, seed=int(seed),
        metrics=_evaluate(est, data.test, world, cfg.task),
        label_errors={"train_after": 0},
    )
    if out_dir is not None:
        _write_artifacts(out_dir, run, train)
    return run


def run_baseline_p(n, world: WorldConfig, cfg: PipelineConfig, seed=0,
                   data: PipelineData | None = None,
                   out_dir=None) -> PipelineRun:
    """Train on n scenes, pseudo-label every other training scene, retrain
    from scratch on the union, evaluate."""
    n = int(n)
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if data is None:
        data = make_pipeline_data(world, seed, n, cfg)
    if n > len(data.labeled):
        raise DataError(
            f"asked for {n} labeled scenes, pool has {len(data.labeled)}"
        )
    train = list(data.labeled[:n])
    pool = list(data.labeled[n:]) + list(data.unlabeled)

    first = _fit_head(train, cfg, seed)
    if pool:
        pseudo = _pseudo_label(first, pool, world, cfg.task)
        full = train + [relabeled_view(s, objs, world)
                        for s, objs in zip(pool, pseudo)]
        est = _fit_head(full, cfg, seed)
        errors = _dataset_label_errors(pseudo, pool, cfg.task.iou_tau)
    else:
        pseudo, full, est, errors = [], train, first, 0

    run = PipelineRun(
        variant="Nk-P", n_labeled_scenes=n, seed=int(seed),
        metrics=_evaluate(est, data.test, world, cfg.task),
        label_errors={"pool_after": errors},
    )
    if out_dir is not None:
        _write_artifacts(out_dir, run, full)
    return run


def _rank_scene_relabels(est, pool):
    scores = [scene_uncertainty(est.predict_uncertainty(s.features))
              for s in pool]
    return sorted(range(len(pool)), key=lambda i: (-scores[i], i))


def _oracle_box_action(box: BevBox, scene: SyntheticScene, current):
    """What the annotator does with one flagged pseudo box: replace it with
    the best-overlapping same-class GT object, or delete it when nothing
    overlaps (or the GT object is already in the label set)."""
    best, best_iou = None, 0.0
    for g in scene.objects:
        if g.class_id != box.class_id:
            continue
        v = iou(box, g)
        if v > best_iou:
            best, best_iou = g, v
    if best is None:
        return None
    key = (best.cx, best.cy, best.w, best.h, best.class_id)
    already = any(
        (b.cx, b.cy, b.w, b.h, b.class_id) == key and b.provenance == "verified"
        for b in current
    )
    if already:
        return None
    return dataclasses.replace(best, provenance="verified")


def _oracle_missed_lookup(row, col, scene: SyntheticScene, current, radius):
    """GT object whose center is nearest the flagged cell within `radius`
    and not already covered by a same-class label; None when the flag is a
    false alarm (budget is spent either way)."""
    best, best_d = None, np.inf
    for g in scene.objects:
        d = float(np.hypot(g.cx - row, g.cy - col))
        if d <= radius and d < best_d:
            if any(b.class_id == g.class_id and iou(b, g) > 0.0
                   for b in current):
                continue
            best, best_d = g, d
    if best is None:
        return None
    return dataclasses.replace(best, provenance="verified")


def run_ours_u(n, verify_budget: BudgetPlan, world: WorldConfig,
               cfg: PipelineConfig, seed=0,
               data: PipelineData | None = None,
               out_dir=None) -> PipelineRun:
    """The verified auto-labeling pipeline. See the module docstring for the
    stage order; with a zero budget this reproduces run_baseline_p at n - s
    training scenes exactly."""
    n = int(n)
    if n < 2:
        raise ConfigError(
            f"n must be >= 2 (a verification slice is held back), got {n}"
        )
    if data is None:
        data = make_pipeline_data(world, seed, n, cfg)
    if n > len(data.labeled):
        raise DataError(
            f"asked for {n} labeled scenes, pool has {len(data.labeled)}"
        )
    s = cfg.verify_slice if cfg.verify_slice is not None else min(10, n - 1)
    s = int(s)
    if s >= n:
        raise ConfigError(f"verify_slice {s} must be < n ({n})")

    train = list(data.labeled[: n - s])
    pool = list(data.labeled[n - s:n]) + list(data.unlabeled)

    first = _fit_head(train, cfg, seed)
    labels = _pseudo_label(first, pool, world, cfg.task)
    errors_before = _dataset_label_errors(labels, pool, cfg.task.iou_tau)

    miss_head = MissedObjectHead(
        base_head=first, gate=cfg.task.gate, random_state=int(seed),
        **{k: v for k, v in cfg.head.items() if k not in ("gamma", "eta")},
    ).fit(train)

    ledger = _Ledger(verify_budget)
    relabeled = set()

    # Pass 1: whole-scene relabels, most uncertain scenes first.
    order = _rank_scene_relabels(first, pool)
    for i in order:
        cost = len(pool[i].objects)
        if not ledger.can_spend("scenes", cost):
            break
        labels[i] = [dataclasses.replace(g, provenance="verified")
                     for g in pool[i].objects]
        relabeled.add(i)
        ledger.spend("scenes", cost)
    ledger.warn_if_clipped("scenes", len(pool))

    # Pass 2: individual pseudo boxes, highest footprint uncertainty first.
    flagged = []
    for i, scene in enumerate(pool):
        if i in relabeled:
            continue
        u_map = first.predict_uncertainty(scene.features)
        for j, box in enumerate(labels[i]):
            flagged.append((box_uncertainty(u_map, box), i, j))
    flagged.sort(key=lambda t: (-t[0], t[1], t[2]))
    replacements = {}
    for _, i, j in flagged:
        if not ledger.can_spend("boxes", 1):
            break
        current = [replacements.get((i, jj), b)
                   for jj, b in enumerate(labels[i])
                   if replacements.get((i, jj), b) is not None]
        replacements[(i, j)] = _oracle_box_action(labels[i][j], pool[i],
                                                  current)
        ledger.spend("boxes", 1)
    ledger.warn_if_clipped("boxes", len(flagged))
    for i in range(len(pool)):
        if i in relabeled:
            continue
        labels[i] = [
            replacements.get((i, j), b)
            for j, b in enumerate(labels[i])
            if replacements.get((i, j), b) is not None
        ]

    # Pass 3: missed-object additions at the miss head's strongest picks.
    picks = []
    for i, scene in enumerate(pool):
        if i in relabeled:
            continue
        p = first.predict_prob(scene.features)
        candidates = miss_candidates(p, cfg.task.gate)
        if not candidates:
            continue
        p_miss = miss_head.predict_miss(scene.features)
        sel = select_missed(p_miss, candidates, cfg.task.top_k,
                            [], cfg.task.radii[0])
        for m in sel.matches:
            picks.append((m.p_miss, i, m.row, m.col))
    picks.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    for _, i, row, col in picks:
        if not ledger.can_spend("missed", 1):
            break
        found = _oracle_missed_lookup(row, col, pool[i], labels[i],
                                      cfg.task.radii[0])
        if found is not None:
            labels[i] = labels[i] + [found]
        ledger.spend("missed", 1)
    ledger.warn_if_clipped("missed", len(picks))

    errors_after = _dataset_label_errors(labels, pool, cfg.task.iou_tau)

    corrected = [relabeled_view(scene, objs, world)
                 for scene, objs in zip(pool, labels)]
    full = train + corrected
    est = _fit_head(full, cfg, seed)

    run = PipelineRun(
        variant="Nk-U", n_labeled_scenes=n, seed=int(seed),
        metrics=_evaluate(est, data.test, world, cfg.task),
        spent=ledger.report(),
        label_errors={"pool_before": errors_before,
                      "pool_after": errors_after},
    )
    if out_dir is not None:
        _write_artifacts(out_dir, run, full)
    return run


def compare_runs(runs) -> dict:
    """Aggregate PipelineRuns by variant: mean and spread of mAP, the
    ordering check Nk-U >= Nk-P >= Nk-R on the means, per-seed win counts
    for the verified variant, and budget actually spent."""
    if not runs:
        raise DataError("no runs to compare")
    by_variant = {}
    for run in runs:
        by_variant.setdefault(run.variant, []).append(run)

    report = {"variants": {}}
    for variant, group in sorted(by_variant.items()):
        maps = np.array([r.metrics["map"] for r in group])
        entry = {
            "n_runs": len(group),
            "seeds": [r.seed for r in group],
            "map_mean": float(maps.mean()),
            "map_std": float(maps.std()),
            "map_min": float(maps.min()),
            "map_max": float(maps.max()),
            "map_per_seed": maps.tolist(),
        }
        spent = [r.spent for r in group if r.spent]
        if spent:
            entry["budget_spent"] = {
                key: float(np.mean([s[key] for s in spent]))
                for key in ("labels_spent", "scenes_relabeled",
                            "boxes_verified", "missed_added")
            }
        report["variants"][variant] = entry

    means = {v: report["variants"][v]["map_mean"] for v in report["variants"]}
    if all(v in means for v in VARIANTS):
        report["ordering"] = {
            "u_ge_p": bool(means["Nk-U"] >= means["Nk-P"]),
            "p_ge_r": bool(means["Nk-P"] >= means["Nk-R"]),
            "holds": bool(means["Nk-U"] >= means["Nk-P"] >= means["Nk-R"]),
        }
        u_by_seed = {r.seed: r.metrics["map"]
                     for r in by_variant.get("Nk-U", [])}
        p_by_seed = {r.seed: r.metrics["map"]
                     for r in by_variant.get("Nk-P", [])}
        shared = sorted(set(u_by_seed) & set(p_by_seed))
        report["ordering"]["u_wins_over_p"] = sum(
            1 for sd in shared if u_by_seed[sd] > p_by_seed[sd]
        )
        report["ordering"]["n_shared_seeds"] = len(shared)
    return report


def _write_artifacts(out_dir, run: PipelineRun, scenes):
    """Manifest JSON, corrected-label JSONL (labels only, no features),
    metrics JSON."""
    import json
    import os

    from .synthbev import file_digest

    os.makedirs(out_dir, exist_ok=True)
    labels_path = os.path.join(out_dir, "corrected_labels.jsonl")
    tmp = f"{labels_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps({
                "scene_id": scene.scene_id,
                "objects": [
                    {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
                     "class_id": b.class_id, "provenance": b.provenance}
                    for b in scene.objects
                ],
            }, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, labels_path)
    write_json(os.path.join(out_dir, "metrics.json"), run.metrics)
    write_json(
        os.path.join(out_dir, "run_manifest.json"),
        {
            "variant": run.variant,
            "n_labeled_scenes": run.n_labeled_scenes,
            "seed": run.seed,
            "spent": run.spent,
            "label_errors": run.label_errors,
            "corrected_labels_sha256": file_digest(labels_path),
            "n_scenes": len(scenes),
        },
    )
