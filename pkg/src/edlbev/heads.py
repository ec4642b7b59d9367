"""A minimal trainable per-cell head with hand-written backprop.

The head is a tiny MLP applied independently at every grid cell (the exact
semantics of a stack of 1x1 convolutions over a [F, H, D] feature tensor):
flatten cells to rows, push them through linear layers with a rectifier
between, and reshape the outputs back onto the grid. Evidential heads emit
2C channels (e_a then e_b logits per class); the sigmoid baseline emits C.

Features are treated as a frozen embedding: only head parameters train.
Everything is numpy and deterministic under a fixed seed, which the
checkpoint round-trip and rerun-identity tests rely on.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .evidential import (
    LossConfig,
    TargetGrid,
    combined_loss,
    combined_loss_grad,
    combined_loss_map,
    evidence_from_logits,
    gaussian_focal_loss,
    gaussian_focal_loss_grad,
)
from .specfun import sigmoid
from .validation import (
    ConfigError,
    DataError,
    NumericError,
    as_float_array,
    check_tensor3d,
)

CHECKPOINT_VERSION = 1
_PROB_CLIP = 1e-7  # sigmoid-path clamp; focal log terms blow up at {0, 1}
# Evidence logits are clamped to this band, which acts as a
# max-concentration prior: total Beta evidence per cell cannot exceed
# 2 + 2 * softplus(12). The bound earns its keep twice. Early in training it
# stops the background avalanche from driving a channel tens of units into
# softplus saturation, where recovery would eat the whole run. At
# convergence it pins the counter-evidence of familiar cells at a ceiling
# where u = 1 / (alpha + beta) still has slope, so weak structure that falls
# short of the ceiling stays distinguishable from well-learned background;
# with an unbounded logit the background drifts ever deeper and every
# familiar cell ends up in the flat tail of the hyperbola. A smooth tanh
# squash was tried instead and rejected: its vanishing outer gradient
# (sech^2) brings back the unrecoverable-channel failure the band exists to
# prevent, while the one-sided rule below recovers at full rate.
_EVIDENCE_LOGIT_CLIP = 12.0


def _clip_evidence(raw):
    return np.clip(raw, -_EVIDENCE_LOGIT_CLIP, _EVIDENCE_LOGIT_CLIP)

LOSS_KINDS = ("evidential", "focal")


@dataclass
class HeadParameters:
    """Weights and biases of the per-cell MLP.

    layers: list of (weight [out, in], bias [out]) pairs, applied in order
    with a rectifier between consecutive layers (never after the last).
    """

    layers: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if not self.layers:
            raise ConfigError("head needs at least one layer")
        cleaned = []
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            w = as_float_array(w, f"layer {i} weight")
            b = as_float_array(b, f"layer {i} bias")
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ConfigError(f"layer {i} has inconsistent shapes")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ConfigError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer "
                    f"emits {prev_out}"
                )
            prev_out = w.shape[0]
            cleaned.append((w, b))
        self.layers = cleaned

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self):
        return HeadParameters(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            activation=self.activation,
        )

    def flatten(self):
        return np.concatenate(
            [np.concatenate([w.reshape(-1), b]) for w, b in self.layers]
        )

    def with_flat(self, vec):
        """A copy with parameters replaced from a flat vector (same layout
        as `flatten`)."""
        vec = as_float_array(vec, "flat parameters")
        if vec.shape != (self.n_params,):
            raise ConfigError(
                f"flat vector has {vec.size} entries, head has {self.n_params}"
            )
        layers = []
        k = 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            layers.append(
                (vec[k:k + nw].reshape(w.shape).copy(), vec[k + nw:k + nw + nb].copy())
            )
            k += nw + nb
        return HeadParameters(layers=layers, activation=self.activation)

    def save(self, path):
        """Write a versioned checkpoint. JSON floats round-trip float64
        bit-exactly, so load(save(p)) == p down to the last bit."""
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "activation": self.activation,
            "layers": [
                {
                    "shape": list(w.shape),
                    "weight": w.reshape(-1).tolist(),
                    "bias": b.tolist(),
                }
                for w, b in self.layers
            ],
        }
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        version = doc.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise DataError(
                f"checkpoint {path} has format_version {version!r}, "
                f"this build reads {CHECKPOINT_VERSION}"
            )
        layers = []
        for entry in doc["layers"]:
            shape = tuple(entry["shape"])
            w = np.asarray(entry["weight"], dtype=float).reshape(shape)
            b = np.asarray(entry["bias"], dtype=float)
            layers.append((w, b))
        return cls(layers=layers, activation=doc.get("activation", "relu"))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 600
    batch_scenes: int = 8
    seed: int = 0
    optimizer: str = "adam"
    # Linear learning-rate ramp over the first steps. -1 picks
    # min(250, steps // 10). Without it, an unlucky init can let the early
    # background avalanche drive an evidence logit so deep into softplus
    # saturation that its gradient never comes back.
    warmup_steps: int = -1
    # "cosine" anneals the rate to zero after warmup; "constant" holds it.
    # Constant is the default: the late phase is where the evidence map
    # differentiates weak structure from background, and annealing it away
    # flattens the uncertainty contrast the downstream tasks read.
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if int(self.steps) < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps!r}")
        if int(self.batch_scenes) < 1:
            raise ConfigError(f"batch_scenes must be >= 1, got {self.batch_scenes!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if int(self.warmup_steps) < -1:
            raise ConfigError(f"warmup_steps must be >= -1, got {self.warmup_steps!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(
                f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}"
            )

    def resolved_warmup(self):
        w = int(self.warmup_steps)
        if w == -1:
            w = min(250, int(self.steps) // 10)
        return w


@dataclass(frozen=True)
class TrainingExample:
    """One supervised grid: features [F, H, D], targets, optional loss mask."""

    features: np.ndarray
    target: TargetGrid
    mask: np.ndarray | None = None
    tag: str = ""

    def __post_init__(self):
        feats = check_tensor3d(self.features, "features")
        if feats.shape[1:] != self.target.shape[1:]:
            raise DataError(
                f"feature grid {feats.shape[1:]} does not match target grid "
                f"{self.target.shape[1:]}"
            )
        if self.mask is not None:
            mask = as_float_array(self.mask, "mask")
            if mask.shape != self.target.shape:
                raise DataError("mask shape must match target shape")
            object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "features", feats)


@dataclass
class TrainResult:
    params: HeadParameters
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))


def detection_bias(kind, out_dim):
    """Final-layer bias so fresh heads start predicting sparse positives.

    Grid labels are overwhelmingly negative (a handful of center cells per
    thousand), and both losses gate their background term by the predicted
    probability. A head that starts at p = 0.5 spends its first steps in a
    background avalanche that can drive the positive-evidence logits so far
    negative that their softplus gradient dies before any center is learned.
    Starting near p = 0.1 keeps that gate nearly shut from step one.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"kind must be one of {LOSS_KINDS}, got {kind!r}")
    if kind == "focal":
        return np.full(int(out_dim), -2.0)
    if out_dim % 2 != 0:
        raise ConfigError("evidential heads need an even output width")
    half = out_dim // 2
    return np.concatenate([np.full(half, -4.0), np.full(half, 6.0)])


def init_head(in_dim, hidden_dims, out_dim, seed, final_bias=None):
    """Fresh head with U[-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero bias.

    final_bias, when given, seeds the last layer's bias (scalar or length
    out_dim); see detection_bias for why detection heads want one.
    """
    if in_dim < 1 or out_dim < 1:
        raise ConfigError("in_dim and out_dim must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [int(in_dim)] + [int(h) for h in hidden_dims] + [int(out_dim)]
    if any(d < 1 for d in dims):
        raise ConfigError(f"all layer widths must be >= 1, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((w, b))
    if final_bias is not None:
        b = np.broadcast_to(
            as_float_array(final_bias, "final_bias"), (int(out_dim),)
        ).copy()
        layers[-1] = (layers[-1][0], b)
    return HeadParameters(layers=layers)


def _cells(features):
    """[F, H, D] -> row-per-cell matrix [H*D, F], scene-standardized.

    Each channel has its scene-wide median removed first. Constant per-scene
    offsets (ambient level, global shifts) carry no per-cell label
    information, and removing them here keeps training and every inference
    path identical without a separate preprocessing step. The median, not the
    mean: background cells dominate every channel, so the median tracks the
    scene offset even when object footprints cover a large fraction of the
    grid, while the mean would soak up part of the object signature itself.
    """
    f, h, d = features.shape
    centered = features - np.median(features, axis=(1, 2), keepdims=True)
    return centered.reshape(f, h * d).T


def _maps(rows, h, d):
    """[H*D, K] -> [K, H, D]."""
    return rows.T.reshape(rows.shape[1], h, d)


def _forward_cached(params: HeadParameters, x):
    """Forward over cell rows, keeping layer inputs for backprop."""
    inputs = []
    for i, (w, b) in enumerate(params.layers):
        inputs.append(x)
        x = x @ w.T + b
        if i < len(params.layers) - 1:
            x = np.maximum(x, 0.0)
    return x, inputs


def _backward(params: HeadParameters, inputs, d_out):
    """Backprop d_out [N, out] through the cached forward pass."""
    grads = [None] * len(params.layers)
    delta = d_out
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        x_in = inputs[i]
        grads[i] = (delta.T @ x_in, delta.sum(axis=0))
        if i > 0:
            delta = delta @ w
            # x_in was already rectified; its positive entries mark where the
            # preactivation passed the rectifier.
            delta = delta * (x_in > 0.0)
    return grads


def head_forward(params: HeadParameters, features):
    """Evidential logit maps (e_a, e_b), each [C, H, D], C = out_dim // 2."""
    features = check_tensor3d(features, "features", channels=params.in_dim)
    if params.out_dim % 2 != 0:
        raise ConfigError("evidential head needs an even out_dim (2 per class)")
    _, h, d = features.shape
    out, _ = _forward_cached(params, _cells(features))
    c = params.out_dim // 2
    maps = _clip_evidence(_maps(out, h, d))
    return maps[:c], maps[c:]


def head_forward_sigmoid(params: HeadParameters, features):
    """Per-class probability map [C, H, D] for the sigmoid baseline head."""
    features = check_tensor3d(features, "features", channels=params.in_dim)
    _, h, d = features.shape
    out, _ = _forward_cached(params, _cells(features))
    return np.clip(sigmoid(_maps(out, h, d)), _PROB_CLIP, 1.0 - _PROB_CLIP)


def example_loss_and_grads(params: HeadParameters, example: TrainingExample,
                           loss_cfg: LossConfig, kind="evidential"):
    """(loss, per-layer grads) for one example under either loss kind."""
    if kind not in LOSS_KINDS:
        raise ConfigError(f"kind must be one of {LOSS_KINDS}, got {kind!r}")
    features = example.features
    if features.shape[0] != params.in_dim:
        raise DataError(
            f"example has {features.shape[0]} feature channels, head expects "
            f"{params.in_dim}"
        )
    _, h, d = features.shape
    out, inputs = _forward_cached(params, _cells(features))
    maps = _maps(out, h, d)

    if kind == "evidential":
        c = params.out_dim // 2
        raw = maps
        maps = _clip_evidence(raw)
        e_a, e_b = maps[:c], maps[c:]
        grid = evidence_from_logits(e_a, e_b)
        loss = combined_loss(grid, example.target, loss_cfg, mask=example.mask)
        d_alpha, d_beta = combined_loss_grad(
            grid, example.target, loss_cfg, mask=example.mask
        )
        # Chain through alpha = softplus(e_a) + 1: d alpha / d e_a = sigmoid(e_a).
        d_ea = d_alpha * sigmoid(e_a)
        d_eb = d_beta * sigmoid(e_b)
        d_maps = np.concatenate([d_ea, d_eb], axis=0)
        # The clamp is part of the forward pass. Gradients pass one-sided: a
        # logit at the boundary ignores pushes that would take it further out
        # but feels pulls back into the band at full rate, so a clipped
        # channel recovers immediately instead of idling outside.
        # (grad_check probes in-band parameters, where this rule and the true
        # derivative agree.)
        blocked = ((raw <= -_EVIDENCE_LOGIT_CLIP) & (d_maps > 0.0)) | (
            (raw >= _EVIDENCE_LOGIT_CLIP) & (d_maps < 0.0)
        )
        d_maps = np.where(blocked, 0.0, d_maps)
    else:
        z = maps
        p = np.clip(sigmoid(z), _PROB_CLIP, 1.0 - _PROB_CLIP)
        loss = gaussian_focal_loss(p, example.target, loss_cfg, mask=example.mask)
        d_p = gaussian_focal_loss_grad(p, example.target, loss_cfg, mask=example.mask)
        d_maps = d_p * p * (1.0 - p)

    n = h * d
    d_out = d_maps.reshape(d_maps.shape[0], n).T
    grads = _backward(params, inputs, d_out)
    return loss, grads


def _locate_bad_cell(params, example, loss_cfg, kind):
    """Best-effort diagnostic: first non-finite per-cell loss entry."""
    try:
        features = example.features
        _, h, d = features.shape
        out, _ = _forward_cached(params, _cells(features))
        maps = _maps(out, h, d)
        if kind == "evidential":
            c = params.out_dim // 2
            maps = _clip_evidence(maps)
            grid = evidence_from_logits(maps[:c], maps[c:])
            per_cell = combined_loss_map(grid, example.target, loss_cfg)
        else:
            p = np.clip(sigmoid(maps), _PROB_CLIP, 1.0 - _PROB_CLIP)
            per_cell = -np.log(np.where(example.target.y > 0, p, 1.0 - p))
        bad = np.argwhere(~np.isfinite(per_cell))
        if bad.size:
            return tuple(int(v) for v in bad[0])
    except Exception:
        pass
    return None


class _Adam:
    """Adaptive-moment updates over the flat parameter layout."""

    def __init__(self, n, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad, scale=1.0):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - scale * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _flatten_grads(params, grads):
    return np.concatenate(
        [np.concatenate([gw.reshape(-1), gb]) for gw, gb in grads]
    )


def train_head(params: HeadParameters, examples, cfg: TrainConfig,
               loss_cfg: LossConfig, kind="evidential") -> TrainResult:
    """Minibatch-train a head; deterministic for a fixed (params, cfg).

    Batches cycle through a seeded shuffle of `examples`, reshuffled each
    pass. Batch loss/gradient are sums over the batch. Raises NumericError
    with the step index and offending cell if the loss goes non-finite.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"kind must be one of {LOSS_KINDS}, got {kind!r}")
    examples = list(examples)
    if not examples:
        raise DataError("train_head needs at least one example")

    work = params.copy()
    theta = work.flatten()
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(examples))
    cursor = 0
    batch = min(int(cfg.batch_scenes), len(examples))
    opt = _Adam(theta.size, cfg.learning_rate) if cfg.optimizer == "adam" else None
    warmup = cfg.resolved_warmup()

    losses = np.zeros(int(cfg.steps))
    for step in range(int(cfg.steps)):
        scale = min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
        if cfg.lr_schedule == "cosine" and int(cfg.steps) > warmup:
            frac = max(0, step - warmup) / max(1, int(cfg.steps) - warmup)
            scale *= 0.5 * (1.0 + np.cos(np.pi * frac))
        if cursor + batch > len(order):
            order = rng.permutation(len(examples))
            cursor = 0
        picked = order[cursor:cursor + batch]
        cursor += batch

        total = 0.0
        grad_acc = np.zeros_like(theta)
        current = work.with_flat(theta)
        for idx in picked:
            loss, grads = example_loss_and_grads(
                current, examples[idx], loss_cfg, kind=kind
            )
            total += loss
            grad_acc += _flatten_grads(current, grads)

        if not np.isfinite(total):
            first = int(picked[0])
            cell = _locate_bad_cell(current, examples[first], loss_cfg, kind)
            raise NumericError(
                f"non-finite training loss at step {step}"
                + (f", first offending cell {cell}" if cell else "")
            )

        losses[step] = total
        if opt is not None:
            theta = opt.step(theta, grad_acc, scale)
        else:
            theta = theta - scale * cfg.learning_rate * grad_acc

    return TrainResult(params=work.with_flat(theta), losses=losses)


def grad_check(params: HeadParameters, example: TrainingExample,
               loss_cfg: LossConfig, n_samples=200, step=1e-5, seed=0,
               kind="evidential"):
    """Max relative error between backprop and central finite differences.

    Samples up to `n_samples` parameters without replacement; relative error
    is |fd - bp| / max(|fd|, |bp|, 1e-8).
    """
    _, grads = example_loss_and_grads(params, example, loss_cfg, kind=kind)
    bp = _flatten_grads(params, grads)
    theta = params.flatten()
    rng = np.random.default_rng(seed)
    picked = rng.choice(theta.size, size=min(int(n_samples), theta.size),
                        replace=False)

    worst = 0.0
    for i in picked:
        orig = theta[i]
        theta[i] = orig + step
        hi, _ = example_loss_and_grads(
            params.with_flat(theta), example, loss_cfg, kind=kind
        )
        theta[i] = orig - step
        lo, _ = example_loss_and_grads(
            params.with_flat(theta), example, loss_cfg, kind=kind
        )
        theta[i] = orig
        fd = (hi - lo) / (2.0 * step)
        rel = abs(fd - bp[i]) / max(abs(fd), abs(bp[i]), 1e-8)
        worst = max(worst, rel)
    return worst


def train_ensemble(count, examples, cfg: TrainConfig, loss_cfg: LossConfig,
                   in_dim, hidden_dims, out_dim, kind="focal"):
    """Train `count` heads from init seeds cfg.seed + 0 .. count-1.

    The data order is governed by cfg.seed alone, so members differ only in
    initialization.
    """
    if int(count) < 2:
        raise ConfigError(f"an ensemble needs count >= 2, got {count!r}")
    results = []
    for i in range(int(count)):
        params0 = init_head(in_dim, hidden_dims, out_dim, seed=cfg.seed + i,
                            final_bias=detection_bias(kind, out_dim))
        results.append(train_head(params0, examples, cfg, loss_cfg, kind=kind))
    return results
