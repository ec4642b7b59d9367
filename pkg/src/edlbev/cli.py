"""Command line front end.

One JSON config file drives everything; any leaf can be overridden through
environment variables named EDLBEV_<SECTION>_<KEY> (EDLBEV_SEED and
EDLBEV_OUTPUT_DIR for the two top-level fields), and --seed / --output-dir
beat both. Every command writes a manifest with the fully resolved config,
the tool version, and sha256 digests of its file inputs; given identical
manifests, reruns produce byte-identical metric JSON.

Exit codes: 0 success, 2 configuration error (argparse uses the same code),
3 data or I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autolabel import (
    BudgetPlan,
    PipelineConfig,
    compare_runs,
    make_pipeline_data,
    run_baseline_p,
    run_baseline_r,
    run_ours_u,
)
from .evidential import (
    LossConfig,
    TargetGrid,
    entropy_score,
    evidence_from_logits,
)
from .heads import (
    HeadParameters,
    TrainConfig,
    TrainingExample,
    detection_bias,
    grad_check,
    head_forward,
    head_forward_sigmoid,
    init_head,
    train_ensemble,
    train_head,
)
from .metrics import map_center_distance, pr_auc, roc_auc
from .synthbev import (
    SplitCounts,
    WorldConfig,
    file_digest,
    generate_dataset,
    load_scenes,
    write_json,
)
from .tasks import (
    TaskConfig,
    decode_boxes,
    find_missed_gt,
    label_box_errors,
    miss_candidates,
    miss_head_forward,
    scene_uncertainty,
    select_missed,
)
from .validation import ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ENV_PREFIX = "EDLBEV_"
_SECTIONS = ("world", "train", "loss", "task")
_GRAD_CHECK_GATE = 1e-4


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, resolved from file + environment + flags."""

    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    hidden: tuple = (48,)
    output_dir: str = "edlbev_runs"
    seed: int = 0

    def resolved(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["hidden"] = list(self.hidden)
        return {
            "world": self.world.to_dict(),
            "train": train,
            "loss": dataclasses.asdict(self.loss),
            "task": self.task.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(doc: dict, env) -> dict:
    """Fold EDLBEV_* variables into the config document (highest-wins is
    handled by call order: file first, then env, then CLI flags)."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        value = _parse_env_value(env[name])
        if rest == "SEED":
            doc["seed"] = value
            continue
        if rest == "OUTPUT_DIR":
            doc["output_dir"] = str(value)
            continue
        section, _, key = rest.partition("_")
        section = section.lower()
        key = key.lower()
        if section not in _SECTIONS or not key:
            raise ConfigError(
                f"unrecognized override {name}; expected EDLBEV_SEED, "
                f"EDLBEV_OUTPUT_DIR, or EDLBEV_<SECTION>_<KEY> with section "
                f"in {tuple(s.upper() for s in _SECTIONS)}"
            )
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise ConfigError(f"config section {section!r} must be an object")
        doc[section][key] = value
    return doc


def load_run_config(path=None, env=None, seed=None, output_dir=None) -> RunConfig:
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    else:
        doc = {}

    unknown = set(doc) - set(_SECTIONS) - {"output_dir", "seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    doc = apply_env_overrides(doc, env if env is not None else os.environ)
    if seed is not None:
        doc["seed"] = int(seed)
    if output_dir is not None:
        doc["output_dir"] = output_dir

    top_seed = int(doc.get("seed", 0))
    world_sec = dict(doc.get("world", {}))
    world_sec.setdefault("seed", top_seed)
    train_sec = dict(doc.get("train", {}))
    hidden = tuple(int(h) for h in train_sec.pop("hidden", (48,)))
    train_sec.setdefault("seed", top_seed)
    try:
        train = TrainConfig(**train_sec)
        loss = LossConfig(**doc.get("loss", {}))
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    return RunConfig(
        world=WorldConfig.from_dict(world_sec),
        train=train,
        loss=loss,
        task=TaskConfig.from_dict(doc.get("task", {})),
        hidden=hidden,
        output_dir=str(doc.get("output_dir", "edlbev_runs")),
        seed=top_seed,
    )


def _write_jsonl(path, records):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def _write_curve_csv(path, rows, header):
    import csv

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    os.replace(tmp, path)


def _input_digests(paths: dict) -> dict:
    return {label: file_digest(p) for label, p in paths.items() if p}


def _write_manifest(cfg: RunConfig, command, inputs, extra=None):
    os.makedirs(cfg.output_dir, exist_ok=True)
    doc = {
        "command": command,
        "tool_version": __version__,
        "resolved_config": cfg.resolved(),
        "inputs": inputs,
    }
    if extra:
        doc.update(extra)
    path = os.path.join(cfg.output_dir, f"{command}_manifest.json")
    write_json(path, doc)
    return path


def _pmap(fn, items, jobs):
    """Order-preserving map; threads only for read-only per-scene scoring."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(fn, items))


def _load_split(path, split, domain=None):
    scenes = load_scenes(path)
    picked = [
        s for s in scenes
        if s.split == split and (domain is None or s.domain == domain)
    ]
    if not picked:
        raise DataError(
            f"{path} holds no scenes with split={split!r}"
            + (f", domain={domain!r}" if domain else "")
        )
    return picked


def _checkpoint_kind(params: HeadParameters, f_dim, c_dim, label="checkpoint"):
    if params.in_dim != f_dim:
        raise DataError(
            f"{label} expects {params.in_dim} input channels, scenes have {f_dim}"
        )
    if params.out_dim == 2 * c_dim:
        return "evidential"
    if params.out_dim == c_dim:
        return "focal"
    raise DataError(
        f"{label} emits {params.out_dim} channels; expected {c_dim} (sigmoid) "
        f"or {2 * c_dim} (evidential) for {c_dim} classes"
    )


def _prob_uncertainty(params: HeadParameters, kind, features):
    if kind == "evidential":
        grid = evidence_from_logits(*head_forward(params, features))
        total = grid.alpha + grid.beta
        return grid.alpha / total, 1.0 / total
    p = head_forward_sigmoid(params, features)
    return p, entropy_score(p)


# ---------------------------------------------------------------------------
# Commands.


def cmd_gen(cfg: RunConfig, args) -> int:
    counts = SplitCounts(
        train_id=args.n_train, test_id=args.n_test_id,
        test_ood=args.n_test_ood, unlabeled_id=args.n_unlabeled,
    )
    _, manifest = generate_dataset(cfg.world, counts, out_dir=cfg.output_dir)
    dataset_manifest = os.path.join(cfg.output_dir, "manifest.json")
    _write_manifest(
        cfg, "gen", inputs=_input_digests({"config": args.config}),
        extra={
            "counts": counts.to_dict(),
            "outputs": {
                "scenes.jsonl": manifest["digest"],
                "manifest.json": file_digest(dataset_manifest),
            },
        },
    )
    print(f"wrote {manifest['n_scenes']} scenes to {cfg.output_dir}")
    print(f"dataset manifest sha256={file_digest(dataset_manifest)}")
    return EXIT_OK


def _make_gradcheck_example(cfg: RunConfig, h=8, d=8):
    rng = np.random.default_rng([cfg.seed, 1213])
    f_dim, c_dim = cfg.world.f, cfg.world.c
    y = (rng.random((c_dim, h, d)) < 0.15).astype(float)
    y_soft = np.maximum(y, rng.random((c_dim, h, d)) * 0.9)
    return TrainingExample(
        features=rng.normal(size=(f_dim, h, d)),
        target=TargetGrid(y=y, y_soft=y_soft),
        tag="gradcheck",
    )


def _run_grad_check(cfg: RunConfig, kind, n_samples=200):
    out_dim = 2 * cfg.world.c if kind == "evidential" else cfg.world.c
    params = init_head(cfg.world.f, cfg.hidden, out_dim, seed=cfg.seed,
                       final_bias=detection_bias(kind, out_dim))
    example = _make_gradcheck_example(cfg)
    return grad_check(params, example, cfg.loss, n_samples=n_samples,
                      seed=cfg.seed, kind=kind)


def cmd_train(cfg: RunConfig, args) -> int:
    if args.data:
        scenes = _load_split(args.data, "train")
    else:
        from .synthbev import generate_split

        scenes = generate_split(cfg.world, "train", "in-distribution",
                                args.n_train)
    from .synthbev import as_training_examples

    kind = args.loss
    examples = as_training_examples(scenes)
    f_dim = examples[0].features.shape[0]
    c_dim = examples[0].target.y.shape[0]
    out_dim = 2 * c_dim if kind == "evidential" else c_dim

    if args.miss:
        if not args.base_checkpoint:
            raise ConfigError("--miss requires --base-checkpoint")
        base = HeadParameters.load(args.base_checkpoint)
        base_kind = _checkpoint_kind(base, f_dim, c_dim, "base checkpoint")
        from .tasks import miss_features

        stacked = []
        for ex in examples:
            p, u = _prob_uncertainty(base, base_kind, ex.features)
            mask = (p < cfg.task.gate).astype(float)
            stacked.append(TrainingExample(
                features=miss_features(ex.features, p, u),
                target=ex.target, mask=mask, tag=ex.tag,
            ))
        examples = stacked
        f_dim = examples[0].features.shape[0]
        kind = "evidential"
        out_dim = 2 * c_dim
        loss_cfg = LossConfig(gamma=0.0, eta=0.0,
                              reg_weight=cfg.loss.reg_weight)
    else:
        loss_cfg = cfg.loss

    if args.grad_check:
        worst = _run_grad_check(cfg, kind)
        print(f"grad check ({kind}): max relative error {worst:.3e}")
        if worst >= _GRAD_CHECK_GATE:
            raise NumericError(
                f"gradient check failed: {worst:.3e} >= {_GRAD_CHECK_GATE:g}"
            )

    os.makedirs(cfg.output_dir, exist_ok=True)
    outputs = {}
    if args.ensemble:
        results = train_ensemble(
            args.ensemble, examples, cfg.train, loss_cfg,
            in_dim=f_dim, hidden_dims=cfg.hidden, out_dim=out_dim, kind=kind,
        )
        for i, result in enumerate(results):
            ckpt = os.path.join(cfg.output_dir, f"checkpoint_member{i}.json")
            result.params.save(ckpt)
            curve = os.path.join(cfg.output_dir,
                                 f"training_curve_member{i}.csv")
            _write_curve_csv(curve, enumerate(result.losses), ("step", "loss"))
            outputs[os.path.basename(ckpt)] = file_digest(ckpt)
        final = float(np.mean([r.losses[-1] for r in results]))
        print(f"trained {len(results)} members, final batch loss {final:.6g}")
    else:
        params = init_head(f_dim, cfg.hidden, out_dim, seed=cfg.seed,
                           final_bias=detection_bias(kind, out_dim))
        result = train_head(params, examples, cfg.train, loss_cfg, kind=kind)
        ckpt = os.path.join(cfg.output_dir, "checkpoint.json")
        result.params.save(ckpt)
        curve = os.path.join(cfg.output_dir, "training_curve.csv")
        _write_curve_csv(curve, enumerate(result.losses), ("step", "loss"))
        outputs[os.path.basename(ckpt)] = file_digest(ckpt)
        print(f"final batch loss {result.losses[-1]:.6g}")
        print(f"checkpoint written to {ckpt}")

    _write_manifest(
        cfg, "train",
        inputs=_input_digests({
            "config": args.config, "data": args.data,
            "base_checkpoint": args.base_checkpoint,
        }),
        extra={
            "loss_kind": kind,
            "miss_head": bool(args.miss),
            "ensemble": int(args.ensemble or 0),
            "n_train_scenes": len(examples),
            "outputs": outputs,
        },
    )
    return EXIT_OK


def _eval_ood(cfg: RunConfig, args, scenes_path) -> dict:
    test = _load_split(scenes_path, "test")
    labels = np.array([1 if s.domain == "ood" else 0 for s in test])
    if labels.min() == labels.max():
        raise DataError(
            "OOD evaluation needs test scenes from both domains"
        )
    f_dim = test[0].features.shape[0]
    c_dim = test[0].target.y.shape[0]

    methods = {}
    primary = HeadParameters.load(args.checkpoint)
    primary_kind = _checkpoint_kind(primary, f_dim, c_dim)

    def model_score(scene):
        _, u = _prob_uncertainty(primary, primary_kind, scene.features)
        return scene_uncertainty(u)

    methods["model"] = model_score
    if args.entropy_checkpoint:
        entropy_params = HeadParameters.load(args.entropy_checkpoint)
        entropy_kind = _checkpoint_kind(entropy_params, f_dim, c_dim,
                                        "entropy checkpoint")

        def entropy_score_fn(scene):
            _, u = _prob_uncertainty(entropy_params, entropy_kind,
                                     scene.features)
            return scene_uncertainty(u)

        methods["entropy"] = entropy_score_fn
    if args.ensemble_checkpoint:
        if len(args.ensemble_checkpoint) < 2:
            raise ConfigError("an ensemble needs at least two checkpoints")
        members = []
        for path in args.ensemble_checkpoint:
            m = HeadParameters.load(path)
            members.append((m, _checkpoint_kind(m, f_dim, c_dim,
                                                "ensemble checkpoint")))

        def ensemble_score(scene):
            probs = np.stack([
                _prob_uncertainty(m, k, scene.features)[0]
                for m, k in members
            ])
            return float(probs.var(axis=0).mean())

        methods["ensemble"] = ensemble_score

    metrics = {"n_id": int((labels == 0).sum()),
               "n_ood": int((labels == 1).sum())}
    for name, score_fn in methods.items():
        scores = np.array(_pmap(score_fn, test, args.jobs))
        roc = roc_auc(scores, labels)
        pr = pr_auc(scores, labels)
        metrics[f"{name}_roc_auc"] = roc.auc
        metrics[f"{name}_pr_auc"] = pr.auc
        _write_jsonl(
            os.path.join(cfg.output_dir, f"ood_scores_{name}.jsonl"),
            [
                {"scene_id": s.scene_id, "score": float(v),
                 "domain": s.domain}
                for s, v in zip(test, scores)
            ],
        )
        roc.write_csv(os.path.join(cfg.output_dir, f"roc_{name}.csv"),
                      header=("fpr", "tpr"))
        pr.write_csv(os.path.join(cfg.output_dir, f"pr_{name}.csv"),
                     header=("recall", "precision"))
    return metrics


def _eval_boxes(cfg: RunConfig, args, scenes_path) -> dict:
    test = _load_split(scenes_path, "test", "in-distribution")
    f_dim = test[0].features.shape[0]
    c_dim = test[0].target.y.shape[0]
    params = HeadParameters.load(args.checkpoint)
    kind = _checkpoint_kind(params, f_dim, c_dim)

    def score_scene(scene):
        p, u = _prob_uncertainty(params, kind, scene.features)
        boxes = decode_boxes(p, cfg.task.decode_threshold,
                             cfg.world.base_sizes)
        return scene, label_box_errors(boxes, scene.objects,
                                       cfg.task.iou_tau, u_map=u)

    records = []
    for scene, scored in _pmap(score_scene, test, args.jobs):
        for sb in scored:
            records.append({
                "scene_id": scene.scene_id,
                "cx": sb.box.cx, "cy": sb.box.cy,
                "w": sb.box.w, "h": sb.box.h,
                "class_id": sb.box.class_id,
                "score": sb.box.score,
                "u_b": sb.u_b,
                "best_iou": sb.best_iou,
                "erroneous": sb.erroneous,
            })
    if not records:
        raise DataError("no boxes decoded; lower task.decode_threshold")
    _write_jsonl(os.path.join(cfg.output_dir, "boxes.jsonl"), records)

    u_b = np.array([r["u_b"] for r in records])
    err = np.array([1 if r["erroneous"] else 0 for r in records])
    metrics = {"n_boxes": int(err.size), "n_erroneous": int(err.sum())}
    if 0 < err.sum() < err.size:
        roc = roc_auc(u_b, err)
        pr = pr_auc(u_b, err)
        metrics["roc_auc"] = roc.auc
        metrics["pr_auc"] = pr.auc
        roc.write_csv(os.path.join(cfg.output_dir, "roc_boxes.csv"),
                      header=("fpr", "tpr"))
        pr.write_csv(os.path.join(cfg.output_dir, "pr_boxes.csv"),
                     header=("recall", "precision"))
    return metrics


def _eval_missed(cfg: RunConfig, args, scenes_path) -> dict:
    if not args.miss_checkpoint:
        raise ConfigError("eval missed requires --miss-checkpoint")
    test = _load_split(scenes_path, "test", "in-distribution")
    f_dim = test[0].features.shape[0]
    c_dim = test[0].target.y.shape[0]
    params = HeadParameters.load(args.checkpoint)
    kind = _checkpoint_kind(params, f_dim, c_dim)
    miss = HeadParameters.load(args.miss_checkpoint)
    if miss.in_dim != f_dim + 2 * c_dim or miss.out_dim != 2 * c_dim:
        raise DataError(
            f"miss checkpoint dims ({miss.in_dim} -> {miss.out_dim}) do not "
            f"match F + 2C = {f_dim + 2 * c_dim} -> 2C = {2 * c_dim}"
        )

    rng = np.random.default_rng([cfg.seed, 4441])
    totals = {
        radius: {name: [0, 0, 0] for name in ("miss_head", "u_only", "random")}
        for radius in cfg.task.radii
    }
    for scene in test:
        p, u = _prob_uncertainty(params, kind, scene.features)
        boxes = decode_boxes(p, cfg.task.decode_threshold,
                             cfg.world.base_sizes)
        missed_gt = find_missed_gt(boxes, scene.objects)
        candidates = miss_candidates(p, cfg.task.gate)
        p_miss = miss_head_forward(miss, scene.features, p, u)
        random_map = rng.random(p.shape)
        for radius in cfg.task.radii:
            for name, score_map in (("miss_head", p_miss), ("u_only", u),
                                    ("random", random_map)):
                acc = totals[radius][name]
                acc[2] += len(missed_gt)
                if not candidates:
                    continue
                sel = select_missed(score_map, candidates, cfg.task.top_k,
                                    missed_gt, radius)
                acc[0] += sum(1 for m in sel.matches if m.matched)
                acc[1] += len(sel.matches)

    metrics = {}
    rows = []
    for radius in cfg.task.radii:
        entry = {}
        for name, (tp, n_sel, n_missed) in totals[radius].items():
            precision = tp / n_sel if n_sel else 1.0
            recall = tp / n_missed if n_missed else 1.0
            f1 = (2 * precision * recall / (precision + recall)
                  if precision + recall else 0.0)
            entry[name] = {"precision": precision, "recall": recall,
                           "f1": f1, "tp": tp, "selected": n_sel,
                           "missed_gt": n_missed}
            rows.append((radius, name, precision, recall, f1))
        metrics[f"radius_{radius:g}"] = entry
    import csv

    path = os.path.join(cfg.output_dir, "missed.csv")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("radius", "method", "precision", "recall", "f1"))
        for radius, name, precision, recall, f1 in rows:
            writer.writerow([repr(float(radius)), name, repr(precision),
                             repr(recall), repr(f1)])
    os.replace(tmp, path)
    return metrics


def _eval_map(cfg: RunConfig, args, scenes_path) -> dict:
    test = _load_split(scenes_path, "test", "in-distribution")
    f_dim = test[0].features.shape[0]
    c_dim = test[0].target.y.shape[0]
    params = HeadParameters.load(args.checkpoint)
    kind = _checkpoint_kind(params, f_dim, c_dim)

    def decode(scene):
        p, _ = _prob_uncertainty(params, kind, scene.features)
        return decode_boxes(p, cfg.task.decode_threshold, cfg.world.base_sizes)

    pred = _pmap(decode, test, args.jobs)
    gt = [list(s.objects) for s in test]
    report = map_center_distance(pred, gt, thresholds=cfg.task.map_thresholds)
    return report.to_dict()


def cmd_eval(cfg: RunConfig, args) -> int:
    scenes_path = args.data or os.path.join(cfg.output_dir, "scenes.jsonl")
    os.makedirs(cfg.output_dir, exist_ok=True)
    runner = {"ood": _eval_ood, "boxes": _eval_boxes,
              "missed": _eval_missed, "map": _eval_map}[args.which]
    metrics = runner(cfg, args, scenes_path)
    metrics_path = os.path.join(cfg.output_dir, f"metrics_{args.which}.json")
    write_json(metrics_path, metrics)

    inputs = {"config": args.config, "data": scenes_path,
              "checkpoint": args.checkpoint,
              "entropy_checkpoint": getattr(args, "entropy_checkpoint", None),
              "miss_checkpoint": getattr(args, "miss_checkpoint", None)}
    for i, path in enumerate(getattr(args, "ensemble_checkpoint", None) or []):
        inputs[f"ensemble_checkpoint_{i}"] = path
    _write_manifest(
        cfg, f"eval_{args.which}", inputs=_input_digests(inputs),
        extra={"jobs": int(args.jobs),
               "outputs": {os.path.basename(metrics_path):
                           file_digest(metrics_path)}},
    )
    print(f"metrics written to {metrics_path}")
    for key in sorted(metrics):
        if isinstance(metrics[key], float):
            print(f"  {key} = {metrics[key]:.4f}")
    return EXIT_OK


_VARIANT_ALIASES = {"R": "Nk-R", "P": "Nk-P", "U": "Nk-U",
                    "Nk-R": "Nk-R", "Nk-P": "Nk-P", "Nk-U": "Nk-U"}


def _budget_from_args(cfg: RunConfig, args) -> BudgetPlan:
    if args.budget is not None:
        cats = tuple(int(v) for v in args.budget)
        if args.budget_total is not None:
            return BudgetPlan(total_labels=args.budget_total,
                              per_category=cats)
        max_objects = cfg.world.objects_per_scene[1]
        return BudgetPlan(
            total_labels=cats[0] * max_objects + cats[1] + cats[2],
            per_category=cats,
        )
    if args.budget_total is not None:
        return BudgetPlan.equal_split(args.budget_total)
    return BudgetPlan.desk_default()


def cmd_autolabel(cfg: RunConfig, args) -> int:
    budget = _budget_from_args(cfg, args)
    variants = []
    for v in args.variants:
        if v not in _VARIANT_ALIASES:
            raise ConfigError(
                f"unknown variant {v!r}; choose from R, P, U"
            )
        name = _VARIANT_ALIASES[v]
        if name not in variants:
            variants.append(name)
    seeds = [int(s) for s in args.seeds]
    if not seeds:
        raise ConfigError("at least one seed is required")

    head = {
        "hidden": cfg.hidden,
        "learning_rate": cfg.train.learning_rate,
        "steps": cfg.train.steps,
        "batch_scenes": cfg.train.batch_scenes,
        "gamma": cfg.loss.gamma,
        "eta": cfg.loss.eta,
        "reg_weight": cfg.loss.reg_weight,
    }
    pcfg = PipelineConfig(
        task=cfg.task, n_unlabeled=args.n_unlabeled, n_test=args.n_test,
        verify_slice=args.verify_slice, head=head,
    )

    os.makedirs(cfg.output_dir, exist_ok=True)
    runs = []
    for seed in seeds:
        data = make_pipeline_data(cfg.world, seed, args.n_labeled, pcfg)
        for variant in variants:
            run_dir = os.path.join(
                cfg.output_dir, "autolabel",
                f"{variant.replace('-', '_')}_seed{seed}",
            )
            if variant == "Nk-R":
                run = run_baseline_r(args.n_labeled, cfg.world, pcfg,
                                     seed=seed, data=data, out_dir=run_dir)
            elif variant == "Nk-P":
                run = run_baseline_p(args.n_labeled, cfg.world, pcfg,
                                     seed=seed, data=data, out_dir=run_dir)
            else:
                run = run_ours_u(args.n_labeled, budget, cfg.world, pcfg,
                                 seed=seed, data=data, out_dir=run_dir)
            runs.append(run)
            print(f"{variant} seed {seed}: mAP {run.metrics['map']:.4f}")

    report = compare_runs(runs)
    report["budget_plan"] = budget.to_dict()
    report_path = os.path.join(cfg.output_dir, "autolabel_report.json")
    write_json(report_path, report)
    _write_manifest(
        cfg, "autolabel", inputs=_input_digests({"config": args.config}),
        extra={
            "variants": variants, "seeds": seeds,
            "n_labeled": int(args.n_labeled),
            "budget_plan": budget.to_dict(),
            "outputs": {os.path.basename(report_path):
                        file_digest(report_path)},
        },
    )
    for variant in variants:
        entry = report["variants"][variant]
        print(f"{variant}: mean mAP {entry['map_mean']:.4f} "
              f"(std {entry['map_std']:.4f}, n={entry['n_runs']})")
    if "ordering" in report:
        print(f"ordering Nk-U >= Nk-P >= Nk-R holds: "
              f"{report['ordering']['holds']}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = {}
    for kind in ("evidential", "focal"):
        results[f"{kind}_max_rel_err"] = _run_grad_check(
            cfg, kind, n_samples=args.samples
        )
        print(f"{kind}: max relative error "
              f"{results[f'{kind}_max_rel_err']:.3e}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.output_dir, "gradcheck_metrics.json")
    write_json(metrics_path, results)
    _write_manifest(
        cfg, "gradcheck", inputs=_input_digests({"config": args.config}),
        extra={"samples": int(args.samples),
               "outputs": {os.path.basename(metrics_path):
                           file_digest(metrics_path)}},
    )
    worst = max(results.values())
    if worst >= _GRAD_CHECK_GATE:
        raise NumericError(
            f"gradient check failed: {worst:.3e} >= {_GRAD_CHECK_GATE:g}"
        )
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, args) -> int:
    from . import specfun
    from .oracles import run_fd_suite, run_quadrature_suite

    quad = run_quadrature_suite(n=args.n)
    fd = run_fd_suite(n_grids=max(2, args.n // 10))

    rng = np.random.default_rng([cfg.seed, 6007])
    x = rng.uniform(0.05, 40.0, size=1000)
    digamma_res = float(np.max(np.abs(
        specfun.digamma(x + 1.0) - specfun.digamma(x) - 1.0 / x
    )))
    trigamma_res = float(np.max(np.abs(
        specfun.trigamma(x + 1.0) - specfun.trigamma(x) + 1.0 / x ** 2
    )))

    checks = [
        ("loss positive term vs quadrature",
         quad["max_abs_err_pos_term"], 1e-6),
        ("loss negative term vs quadrature",
         quad["max_abs_err_neg_term"], 1e-6),
        ("kl closed form vs quadrature", quad["max_abs_err_kl"], 1e-6),
        ("analytic gradients vs finite differences",
         fd["max_rel_err"], 1e-4),
        ("digamma recurrence residual", digamma_res, 1e-10),
        ("trigamma recurrence residual", trigamma_res, 1e-10),
    ]
    metrics = {}
    failed = False
    for label, value, bound in checks:
        ok = value < bound
        failed = failed or not ok
        key = label.replace(" ", "_")
        metrics[key] = {"value": value, "bound": bound, "pass": bool(ok)}
        print(f"[{'PASS' if ok else 'FAIL'}] {label}: "
              f"{value:.3e} (bound {bound:g})")

    os.makedirs(cfg.output_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.output_dir, "selftest_metrics.json")
    write_json(metrics_path, metrics)
    _write_manifest(
        cfg, "selftest", inputs=_input_digests({"config": args.config}),
        extra={"n": int(args.n),
               "outputs": {os.path.basename(metrics_path):
                           file_digest(metrics_path)}},
    )
    if failed:
        raise NumericError("selftest found oracle disagreements (see above)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON run config (defaults apply when omitted)")
    common.add_argument("--output-dir", default=None,
                        help="override config output_dir")
    common.add_argument("--seed", type=int, default=None,
                        help="override config seed")
    common.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for per-scene evaluation")

    parser = argparse.ArgumentParser(
        prog="edlbev",
        description="Evidential uncertainty toolkit for grid-world detection",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common],
                       help="generate a synthetic dataset")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test-id", type=int, default=100)
    p.add_argument("--n-test-ood", type=int, default=100)
    p.add_argument("--n-unlabeled", type=int, default=100)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a head")
    p.add_argument("--data", default=None,
                   help="scenes.jsonl to train on (else scenes are generated)")
    p.add_argument("--n-train", type=int, default=200,
                   help="scenes to generate when --data is omitted")
    p.add_argument("--loss", choices=("evidential", "focal"),
                   default="evidential")
    p.add_argument("--ensemble", type=int, default=0, metavar="N",
                   help="train N members differing in init seed")
    p.add_argument("--grad-check", action="store_true",
                   help="verify gradients before training; abort on failure")
    p.add_argument("--miss", action="store_true",
                   help="train the missed-object head (needs --base-checkpoint)")
    p.add_argument("--base-checkpoint", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("which", choices=("ood", "boxes", "missed", "map"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="scenes.jsonl (default: <output_dir>/scenes.jsonl)")
    p.add_argument("--entropy-checkpoint", default=None,
                   help="sigmoid-head baseline for the OOD comparison")
    p.add_argument("--ensemble-checkpoint", action="append", default=None,
                   help="repeatable; ensemble members for the OOD comparison")
    p.add_argument("--miss-checkpoint", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("autolabel", parents=[common],
                       help="run the auto-label pipeline and baselines")
    p.add_argument("--n-labeled", type=int, default=100)
    p.add_argument("--n-unlabeled", type=int, default=100)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", default=["R", "P", "U"])
    p.add_argument("--budget-total", type=int, default=None)
    p.add_argument("--budget", type=int, nargs=3, default=None,
                   metavar=("SCENES", "BOXES", "MISSED"))
    p.add_argument("--verify-slice", type=int, default=None)
    p.set_defaults(fn=cmd_autolabel)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare backprop against finite differences")
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common],
                       help="run the quadrature and finite-difference oracles")
    p.add_argument("--n", type=int, default=100)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed=args.seed,
                              output_dir=args.output_dir)
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
