"""Synthetic bird's-eye-view worlds with controllable distribution shift.

A scene is a [F, H, D] feature tensor plus axis-aligned boxes on the grid.
Grid convention: cell (r, c) sits at integer coordinates (r, c); a box center
(cx, cy) is continuous, cx runs along the H axis and cy along the D axis, and
the rounded center cell is (floor(cx + 0.5), floor(cy + 0.5)).

Features are built as

    ambient + mean_shift + class signature field + N(0, noise_sigma^2)

where ambient is one scalar per scene (sensor-gain-style variation that keeps
a bare scene-mean statistic from separating the domains on its own), and the
signature field places each object's class template, scaled by a per-object
amplitude and a radial falloff from the center, on the cells under its
footprint. The falloff is what lets a per-cell head localize centers; the
per-object amplitude draw produces genuinely faint objects that detectors
miss, which the missed-object task needs.

The out-of-distribution domain applies three shifts: a different class mix, a
constant feature-mean offset of `feature_mean_shift * noise_sigma`, and an
object-size scale factor.

Generation is deterministic: every scene derives its own rng stream from
(world seed, split, domain, scene index), so datasets are pure functions of
(config, counts) regardless of generation order or chunking.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .evidential import TargetGrid
from .validation import ConfigError, DataError

PROVENANCE_TAGS = ("ground-truth", "predicted", "pseudo", "verified")
SPLIT_TAGS = ("train", "test", "unlabeled")
DOMAIN_TAGS = ("in-distribution", "ood")

_SPLIT_CODE = {name: i + 1 for i, name in enumerate(SPLIT_TAGS)}
_DOMAIN_CODE = {name: i + 1 for i, name in enumerate(DOMAIN_TAGS)}

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class BevBox:
    """Axis-aligned grid-space box; w spans the cx (H) axis, h the cy (D) axis."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    score: float | None = None
    provenance: str = "ground-truth"

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise DataError(f"box {name} must be finite, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"box sides must be positive, got w={self.w}, h={self.h}")
        if int(self.class_id) < 0:
            raise DataError(f"class_id must be >= 0, got {self.class_id}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise DataError(f"score must lie in [0, 1], got {self.score}")
        if self.provenance not in PROVENANCE_TAGS:
            raise DataError(
                f"provenance must be one of {PROVENANCE_TAGS}, got {self.provenance!r}"
            )
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "class_id", int(self.class_id))

    def corners(self):
        """(x0, y0, x1, y1) with x along the cx axis."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def center_cell(self, h, d):
        r = int(np.floor(self.cx + 0.5))
        c = int(np.floor(self.cy + 0.5))
        return min(max(r, 0), h - 1), min(max(c, 0), d - 1)


@dataclass(frozen=True)
class OodShift:
    """The three knobs that define the shifted domain."""

    class_mix: tuple = (0.10, 0.25, 0.65)
    feature_mean_shift: float = 0.75  # in units of noise_sigma
    object_size_scale: float = 1.4

    def __post_init__(self):
        mix = tuple(float(v) for v in self.class_mix)
        if any(v < 0 for v in mix) or sum(mix) <= 0:
            raise ConfigError(f"class_mix must be non-negative with positive sum, got {mix}")
        if not np.isfinite(self.feature_mean_shift):
            raise ConfigError("feature_mean_shift must be finite")
        if self.object_size_scale <= 0:
            raise ConfigError("object_size_scale must be > 0")
        object.__setattr__(self, "class_mix", mix)


@dataclass(frozen=True)
class WorldConfig:
    h: int = 32
    d: int = 32
    f: int = 16
    c: int = 3
    objects_per_scene: tuple = (1, 6)
    class_mix: tuple = (0.65, 0.25, 0.10)
    feature_noise_sigma: float = 1.0
    ambient_sigma: float = 1.0
    template_amplitude: float = 2.5
    amplitude_range: tuple = (0.35, 1.0)
    base_sizes: tuple = (3.5, 4.5, 5.5)
    size_jitter: tuple = (0.85, 1.15)
    sigma_splat: float = 1.5
    # Per-class radial decay of the feature signature, in cells. Empty means
    # base_sizes / 3, the radius at nominal size; the sampled instance
    # rescales it (see _signature_field for the energy budget).
    signature_sigmas: tuple = ()
    margin: float = 3.0
    min_center_separation: float = 4.0
    ood: OodShift = field(default_factory=OodShift)
    seed: int = 0

    def __post_init__(self):
        if self.h < 8 or self.d < 8:
            raise ConfigError("grid must be at least 8x8")
        if self.f < 4:
            raise ConfigError("need at least 4 feature channels")
        if self.c < 2:
            raise ConfigError("need at least 2 classes")
        lo, hi = self.objects_per_scene
        if not (1 <= lo <= hi):
            raise ConfigError(f"objects_per_scene must be 1 <= lo <= hi, got {self.objects_per_scene}")
        mix = tuple(float(v) for v in self.class_mix)
        if len(mix) != self.c:
            raise ConfigError(f"class_mix needs {self.c} weights, got {len(mix)}")
        if any(v < 0 for v in mix) or sum(mix) <= 0:
            raise ConfigError("class_mix must be non-negative with positive sum")
        sizes = tuple(float(v) for v in self.base_sizes)
        if len(sizes) != self.c:
            raise ConfigError(f"base_sizes needs {self.c} entries, got {len(sizes)}")
        if any(v <= 0 for v in sizes):
            raise ConfigError("base_sizes must be positive")
        if len(self.ood.class_mix) != self.c:
            raise ConfigError("ood.class_mix length must match c")
        if self.feature_noise_sigma < 0 or self.ambient_sigma < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.sigma_splat <= 0:
            raise ConfigError("sigma_splat must be > 0")
        sig = tuple(float(v) for v in self.signature_sigmas)
        if not sig:
            sig = tuple(v / 3.0 for v in sizes)
        if len(sig) != self.c:
            raise ConfigError(f"signature_sigmas needs {self.c} entries, got {len(sig)}")
        if any(v <= 0 for v in sig):
            raise ConfigError("signature_sigmas must be positive")
        object.__setattr__(self, "signature_sigmas", sig)
        a_lo, a_hi = self.amplitude_range
        if not (0 < a_lo <= a_hi):
            raise ConfigError(f"amplitude_range must be 0 < lo <= hi, got {self.amplitude_range}")
        object.__setattr__(self, "objects_per_scene", (int(lo), int(hi)))
        object.__setattr__(self, "class_mix", mix)
        object.__setattr__(self, "base_sizes", sizes)
        object.__setattr__(self, "amplitude_range", (float(a_lo), float(a_hi)))
        object.__setattr__(self, "size_jitter", tuple(float(v) for v in self.size_jitter))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "ood" in doc and not isinstance(doc["ood"], OodShift):
            doc["ood"] = OodShift(**doc["ood"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad world config: {exc}") from exc


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    features: np.ndarray
    objects: tuple
    target: TargetGrid
    domain: str = "in-distribution"
    split: str = "train"

    def __post_init__(self):
        if self.domain not in DOMAIN_TAGS:
            raise DataError(f"domain must be one of {DOMAIN_TAGS}, got {self.domain!r}")
        if self.split not in SPLIT_TAGS:
            raise DataError(f"split must be one of {SPLIT_TAGS}, got {self.split!r}")
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 3:
            raise DataError("features must be [F, H, D]")
        if feats.shape[1:] != self.target.shape[1:]:
            raise DataError("features and target disagree on the grid size")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def grid_shape(self):
        return self.features.shape[1:]


def class_templates(cfg: WorldConfig):
    """[C, F] per-class feature templates, mutually orthogonal, zero-mean
    across channels, with per-channel RMS equal to template_amplitude.

    Zero channel mean keeps object footprints from moving a scene-mean
    statistic; separating domains has to go through per-cell structure.
    Orthogonality keeps the class rays from interfering: with correlated
    random templates the big-footprint classes bleed evidence pressure onto
    the others and the small classes never train cleanly.
    """
    rng = np.random.default_rng([int(cfg.seed), 7919])
    t = rng.normal(size=(cfg.c, cfg.f))
    t = t - t.mean(axis=1, keepdims=True)
    # Gram-Schmidt inside the zero-mean subspace; re-centering is a no-op
    # after the first pass but keeps rounding from drifting the mean.
    for i in range(cfg.c):
        for j in range(i):
            t[i] -= (t[i] @ t[j]) / (t[j] @ t[j]) * t[j]
        t[i] -= t[i].mean()
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise ConfigError("class templates degenerate; need f > c")
    return t / norms * np.sqrt(cfg.f) * cfg.template_amplitude


def splat_targets(objects, cfg: WorldConfig) -> TargetGrid:
    """Binary center map plus Gaussian heatmap (sigma_splat, class-wise max)."""
    y = np.zeros((cfg.c, cfg.h, cfg.d))
    y_soft = np.zeros((cfg.c, cfg.h, cfg.d))
    rr, cc = np.meshgrid(np.arange(cfg.h), np.arange(cfg.d), indexing="ij")
    two_sig2 = 2.0 * cfg.sigma_splat ** 2
    for box in objects:
        if not (0 <= box.class_id < cfg.c):
            raise DataError(f"box class_id {box.class_id} out of range for c={cfg.c}")
        r, c = box.center_cell(cfg.h, cfg.d)
        y[box.class_id, r, c] = 1.0
        dist2 = (rr - box.cx) ** 2 + (cc - box.cy) ** 2
        y_soft[box.class_id] = np.maximum(
            y_soft[box.class_id], np.exp(-dist2 / two_sig2)
        )
    # The heatmap peaks at the continuous center; force exact 1 at the rounded
    # center cell so the (1 - y_soft) discount can never punish a labeled cell.
    y_soft = np.maximum(y_soft, y)
    return TargetGrid(y=y, y_soft=y_soft)


def _sample_objects(cfg: WorldConfig, domain, rng):
    mix = np.asarray(
        cfg.ood.class_mix if domain == "ood" else cfg.class_mix, dtype=float
    )
    mix = mix / mix.sum()
    size_scale = cfg.ood.object_size_scale if domain == "ood" else 1.0
    lo, hi = cfg.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    placed = []
    amplitudes = []
    lo_hd = cfg.margin
    for _ in range(n):
        k = int(rng.choice(cfg.c, p=mix))
        for _attempt in range(300):
            cx = rng.uniform(lo_hd, cfg.h - 1 - cfg.margin)
            cy = rng.uniform(lo_hd, cfg.d - 1 - cfg.margin)
            if all(
                (cx - b.cx) ** 2 + (cy - b.cy) ** 2
                >= cfg.min_center_separation ** 2
                for b in placed
            ):
                break
        else:
            continue  # crowded scene; accept fewer objects
        w = cfg.base_sizes[k] * rng.uniform(*cfg.size_jitter) * size_scale
        h = cfg.base_sizes[k] * rng.uniform(*cfg.size_jitter) * size_scale
        placed.append(BevBox(cx=cx, cy=cy, w=w, h=h, class_id=k))
        amplitudes.append(float(rng.uniform(*cfg.amplitude_range)))
    return placed, amplitudes


def _signature_field(cfg: WorldConfig, objects, amplitudes, templates):
    sig = np.zeros((cfg.f, cfg.h, cfg.d))
    for box, amp in zip(objects, amplitudes):
        r0 = max(0, math.ceil(box.cx - box.w / 2.0))
        r1 = min(cfg.h - 1, math.floor(box.cx + box.w / 2.0))
        c0 = max(0, math.ceil(box.cy - box.h / 2.0))
        c1 = min(cfg.d - 1, math.floor(box.cy + box.h / 2.0))
        if r0 > r1 or c0 > c1:
            continue
        rows = np.arange(r0, r1 + 1)
        cols = np.arange(c0, c1 + 1)
        dist2 = (
            (rows[:, None] - box.cx) ** 2 + (cols[None, :] - box.cy) ** 2
        )
        # Signature energy is a per-object constant: the falloff radius grows
        # with the sampled footprint while the peak dims by the inverse area,
        # so a larger instance spreads the same return thinner instead of
        # shining brighter. Size jitter exercises this law during training.
        spread = math.sqrt(box.w * box.h) / cfg.base_sizes[box.class_id]
        sigma = cfg.signature_sigmas[box.class_id] * spread
        g = (amp / spread ** 2) * np.exp(-dist2 / (2.0 * sigma ** 2))
        sig[:, r0:r1 + 1, c0:c1 + 1] += (
            templates[box.class_id][:, None, None] * g[None, :, :]
        )
    return sig


def generate_scene(cfg: WorldConfig, domain, rng, scene_id="scene",
                   split="train") -> SyntheticScene:
    """One scene from an explicit rng stream. Draw order is part of the
    determinism contract; do not reorder the sampling below."""
    if domain not in DOMAIN_TAGS:
        raise ConfigError(f"domain must be one of {DOMAIN_TAGS}, got {domain!r}")
    objects, amplitudes = _sample_objects(cfg, domain, rng)
    ambient = float(rng.normal(0.0, cfg.ambient_sigma))
    noise = (
        rng.normal(0.0, cfg.feature_noise_sigma, size=(cfg.f, cfg.h, cfg.d))
        if cfg.feature_noise_sigma > 0
        else np.zeros((cfg.f, cfg.h, cfg.d))
    )
    shift = (
        cfg.ood.feature_mean_shift * cfg.feature_noise_sigma
        if domain == "ood"
        else 0.0
    )
    templates = class_templates(cfg)
    features = (
        _signature_field(cfg, objects, amplitudes, templates)
        + ambient
        + shift
        + noise
    )
    return SyntheticScene(
        scene_id=scene_id,
        features=features,
        objects=tuple(objects),
        target=splat_targets(objects, cfg),
        domain=domain,
        split=split,
    )


def _scene_rng(cfg: WorldConfig, split, domain, index):
    return np.random.default_rng(
        [int(cfg.seed), _SPLIT_CODE[split], _DOMAIN_CODE[domain], int(index)]
    )


def generate_split(cfg: WorldConfig, split, domain, count):
    """`count` scenes for one (split, domain), each from its own derived
    stream; scene i is identical no matter how the rest are generated."""
    if split not in SPLIT_TAGS:
        raise ConfigError(f"split must be one of {SPLIT_TAGS}, got {split!r}")
    scenes = []
    for i in range(int(count)):
        rng = _scene_rng(cfg, split, domain, i)
        scenes.append(
            generate_scene(
                cfg, domain, rng,
                scene_id=f"{split}-{domain}-{i:05d}", split=split,
            )
        )
    return scenes


@dataclass(frozen=True)
class SplitCounts:
    train_id: int = 0
    test_id: int = 0
    test_ood: int = 0
    unlabeled_id: int = 0

    def __post_init__(self):
        for name in ("train_id", "test_id", "test_ood", "unlabeled_id"):
            v = int(getattr(self, name))
            if v < 0:
                raise ConfigError(f"{name} must be >= 0")
            object.__setattr__(self, name, v)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad counts config: {exc}") from exc


def generate_dataset(cfg: WorldConfig, counts: SplitCounts, out_dir=None):
    """All splits as {"train", "test_id", "test_ood", "unlabeled"} lists; when
    out_dir is given, also writes scenes.jsonl plus manifest.json and returns
    (scenes, manifest)."""
    scenes = {
        "train": generate_split(cfg, "train", "in-distribution", counts.train_id),
        "test_id": generate_split(cfg, "test", "in-distribution", counts.test_id),
        "test_ood": generate_split(cfg, "test", "ood", counts.test_ood),
        "unlabeled": generate_split(
            cfg, "unlabeled", "in-distribution", counts.unlabeled_id
        ),
    }
    flat = [s for group in scenes.values() for s in group]
    manifest = {
        "format_version": MANIFEST_VERSION,
        "world": cfg.to_dict(),
        "counts": counts.to_dict(),
        "n_scenes": len(flat),
        "n_objects": int(sum(len(s.objects) for s in flat)),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "scenes.jsonl")
        manifest["digest"] = save_scenes(path, flat)
        manifest["scenes_file"] = "scenes.jsonl"
        write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return scenes, manifest


def scene_to_json_obj(scene: SyntheticScene) -> dict:
    f, h, d = scene.features.shape
    c = scene.target.y.shape[0]
    return {
        "scene_id": scene.scene_id,
        "H": h,
        "D": d,
        "F": f,
        "C": c,
        "domain": scene.domain,
        "split": scene.split,
        "objects": [
            {
                "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
                "class_id": b.class_id,
            }
            for b in scene.objects
        ],
        "features": scene.features.reshape(-1).tolist(),
        "target_y": scene.target.y.reshape(-1).tolist(),
        "target_soft": scene.target.y_soft.reshape(-1).tolist(),
    }


def scene_from_json_obj(doc: dict) -> SyntheticScene:
    try:
        h, d, f, c = int(doc["H"]), int(doc["D"]), int(doc["F"]), int(doc["C"])
        features = np.asarray(doc["features"], dtype=float).reshape(f, h, d)
        y = np.asarray(doc["target_y"], dtype=float).reshape(c, h, d)
        y_soft = np.asarray(doc["target_soft"], dtype=float).reshape(c, h, d)
        objects = tuple(
            BevBox(
                cx=o["cx"], cy=o["cy"], w=o["w"], h=o["h"],
                class_id=o["class_id"],
            )
            for o in doc["objects"]
        )
        return SyntheticScene(
            scene_id=str(doc["scene_id"]),
            features=features,
            objects=objects,
            target=TargetGrid(y=y, y_soft=y_soft),
            domain=doc["domain"],
            split=doc["split"],
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed scene record: {exc}") from exc


def save_scenes(path, scenes) -> str:
    """Write scenes as JSONL (atomically) and return the file's sha256."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_json_obj(scene), sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)
    return file_digest(path)


def load_scenes(path):
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: not valid JSON: {exc}") from exc
            scenes.append(scene_from_json_obj(doc))
    if not scenes:
        raise DataError(f"{path} holds no scenes")
    return scenes


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path, obj):
    """Canonical JSON writer: sorted keys, two-space indent, trailing newline.
    Reruns that compute identical values produce byte-identical files."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def as_training_examples(scenes):
    """Scenes -> TrainingExamples, refusing targets of unlabeled scenes.

    Unlabeled scenes carry ground truth for oracle verification only; any
    code path that wants to train on them must first construct an explicit
    relabeled view (see `relabeled_view`).
    """
    from .heads import TrainingExample

    out = []
    for s in scenes:
        if s.split == "unlabeled":
            raise DataError(
                f"scene {s.scene_id} is unlabeled; its targets are not "
                "visible to training"
            )
        out.append(TrainingExample(features=s.features, target=s.target, tag=s.scene_id))
    return out


def relabeled_view(scene: SyntheticScene, objects, cfg: WorldConfig,
                   split="train") -> SyntheticScene:
    """The same features under a new label set (pseudo boxes, oracle
    corrections, ...); targets are re-splatted from `objects`."""
    return SyntheticScene(
        scene_id=scene.scene_id,
        features=scene.features,
        objects=tuple(objects),
        target=splat_targets(objects, cfg),
        domain=scene.domain,
        split=split,
    )
