"""Estimator wrappers around the per-cell heads.

These follow the scikit-learn conventions (constructor stores parameters,
`fit` learns trailing-underscore attributes, `get_params`/`set_params`/`clone`
work) so the heads drop into existing tooling. `fit` takes a list of scenes
rather than a feature matrix; the per-cell reshaping lives in the head layer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evidential import LossConfig, entropy_score, evidence_from_logits
from .heads import (
    TrainConfig,
    TrainingExample,
    detection_bias,
    head_forward,
    head_forward_sigmoid,
    init_head,
    train_ensemble,
    train_head,
)
from .synthbev import as_training_examples
from .tasks import miss_features
from .validation import ConfigError, DataError, check_tensor3d


def _require_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(
            f"{type(est).__name__} is not fitted yet; call fit() first"
        )


class _BevHeadBase(BaseEstimator):
    """Shared plumbing: config assembly, scene conversion, dim inference."""

    def __init__(self, hidden=(48,), learning_rate=3e-3, steps=3500,
                 batch_scenes=8, gamma=2.0, eta=4.0, reg_weight=1e-4,
                 random_state=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_scenes = batch_scenes
        self.gamma = gamma
        self.eta = eta
        self.reg_weight = reg_weight
        self.random_state = random_state

    def _loss_config(self):
        return LossConfig(gamma=self.gamma, eta=self.eta,
                          reg_weight=self.reg_weight)

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, steps=self.steps,
            batch_scenes=self.batch_scenes, seed=self.random_state,
        )

    @staticmethod
    def _dims(examples):
        if not examples:
            raise DataError("need at least one training scene")
        first = examples[0]
        return first.features.shape[0], first.target.y.shape[0]

    def _check_features(self, features):
        features = check_tensor3d(features, "features")
        if features.shape[0] != self.in_dim_:
            raise DataError(
                f"expected {self.in_dim_} feature channels, "
                f"got {features.shape[0]}"
            )
        return features


class EvidentialBevHead(_BevHeadBase):
    """Per-cell head emitting two evidence channels per class.

    `predict_prob` is alpha / (alpha + beta) per cell, `predict_uncertainty`
    the evidential 1 / (alpha + beta).
    """

    def fit(self, scenes, y=None):
        examples = as_training_examples(scenes)
        self.in_dim_, self.n_classes_ = self._dims(examples)
        params = init_head(
            self.in_dim_, tuple(self.hidden), 2 * self.n_classes_,
            seed=self.random_state,
            final_bias=detection_bias("evidential", 2 * self.n_classes_),
        )
        result = train_head(params, examples, self._train_config(),
                            self._loss_config(), kind="evidential")
        self.params_ = result.params
        self.losses_ = result.losses
        return self

    def _evidence(self, features):
        _require_fitted(self, "params_")
        features = self._check_features(features)
        e_a, e_b = head_forward(self.params_, features)
        return evidence_from_logits(e_a, e_b)

    def predict_prob(self, features):
        grid = self._evidence(features)
        return grid.alpha / (grid.alpha + grid.beta)

    def predict_uncertainty(self, features):
        grid = self._evidence(features)
        return 1.0 / (grid.alpha + grid.beta)

    def predict(self, features):
        return self.predict_prob(features)


class GaussianFocalBevHead(_BevHeadBase):
    """Sigmoid head trained with the penalty-weighted focal loss.

    Its confidence signal is the per-cell binary entropy of the predicted
    probability, so `predict_uncertainty` peaks at p = 0.5.
    """

    def fit(self, scenes, y=None):
        examples = as_training_examples(scenes)
        self.in_dim_, self.n_classes_ = self._dims(examples)
        params = init_head(
            self.in_dim_, tuple(self.hidden), self.n_classes_,
            seed=self.random_state,
            final_bias=detection_bias("focal", self.n_classes_),
        )
        result = train_head(params, examples, self._train_config(),
                            self._loss_config(), kind="focal")
        self.params_ = result.params
        self.losses_ = result.losses
        return self

    def predict_prob(self, features):
        _require_fitted(self, "params_")
        features = self._check_features(features)
        return head_forward_sigmoid(self.params_, features)

    def predict_uncertainty(self, features):
        return entropy_score(self.predict_prob(features))

    def predict(self, features):
        return self.predict_prob(features)


class DeepEnsembleBevHead(_BevHeadBase):
    """Ensemble of focal heads differing only in initialization seed.

    `predict_prob` averages the member probabilities; `predict_uncertainty`
    is the across-member variance per cell (disagreement).
    """

    def __init__(self, hidden=(48,), learning_rate=3e-3, steps=3500,
                 batch_scenes=8, gamma=2.0, eta=4.0, reg_weight=1e-4,
                 random_state=0, n_members=5):
        super().__init__(
            hidden=hidden, learning_rate=learning_rate, steps=steps,
            batch_scenes=batch_scenes, gamma=gamma, eta=eta,
            reg_weight=reg_weight, random_state=random_state,
        )
        self.n_members = n_members

    def fit(self, scenes, y=None):
        if int(self.n_members) < 2:
            raise ConfigError(
                f"n_members must be >= 2, got {self.n_members!r}"
            )
        examples = as_training_examples(scenes)
        self.in_dim_, self.n_classes_ = self._dims(examples)
        results = train_ensemble(
            int(self.n_members), examples, self._train_config(),
            self._loss_config(), in_dim=self.in_dim_,
            hidden_dims=tuple(self.hidden), out_dim=self.n_classes_,
            kind="focal",
        )
        self.members_ = [r.params for r in results]
        self.losses_ = [r.losses for r in results]
        return self

    def _member_probs(self, features):
        _require_fitted(self, "members_")
        features = self._check_features(features)
        return np.stack(
            [head_forward_sigmoid(m, features) for m in self.members_]
        )

    def predict_prob(self, features):
        return self._member_probs(features).mean(axis=0)

    def predict_uncertainty(self, features):
        return self._member_probs(features).var(axis=0)

    def predict(self, features):
        return self.predict_prob(features)


class MissedObjectHead(BaseEstimator):
    """Auxiliary evidential head for recovering detector misses.

    Works on top of a fitted base head: each cell gets the concatenated
    vector [features, p, u] from the base head, and the same evidential loss
    is applied only where the base probability fell below `gate` (everything
    else is masked out). `predict_miss` returns the head's probability map,
    meaningful on gated cells.
    """

    def __init__(self, base_head=None, gate=0.05, hidden=(48,),
                 learning_rate=3e-3, steps=3500, batch_scenes=8,
                 reg_weight=1e-4, random_state=0):
        self.base_head = base_head
        self.gate = gate
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_scenes = batch_scenes
        self.reg_weight = reg_weight
        self.random_state = random_state

    def _stack(self, features):
        p = self.base_head.predict_prob(features)
        u = self.base_head.predict_uncertainty(features)
        return miss_features(features, p, u), p

    def fit(self, scenes, y=None):
        if self.base_head is None:
            raise ConfigError("MissedObjectHead needs a fitted base_head")
        _require_fitted(self.base_head, "params_")
        gate = float(self.gate)
        if not 0.0 < gate < 1.0:
            raise ConfigError(f"gate must be in (0, 1), got {self.gate!r}")

        examples = []
        for ex in as_training_examples(scenes):
            stacked, p = self._stack(ex.features)
            mask = (p < gate).astype(float)
            examples.append(
                TrainingExample(features=stacked, target=ex.target,
                                mask=mask, tag=ex.tag)
            )
        self.in_dim_ = examples[0].features.shape[0]
        self.n_classes_ = examples[0].target.y.shape[0]
        # The gate masks the focal factors' job away, so the plain Bayes-risk
        # form (gamma = eta = 0) is used here.
        loss_cfg = LossConfig(gamma=0.0, eta=0.0, reg_weight=self.reg_weight)
        params = init_head(
            self.in_dim_, tuple(self.hidden), 2 * self.n_classes_,
            seed=self.random_state,
            final_bias=detection_bias("evidential", 2 * self.n_classes_),
        )
        result = train_head(
            params, examples,
            TrainConfig(
                learning_rate=self.learning_rate, steps=self.steps,
                batch_scenes=self.batch_scenes, seed=self.random_state,
            ),
            loss_cfg, kind="evidential",
        )
        self.params_ = result.params
        self.losses_ = result.losses
        return self

    def predict_miss(self, features):
        _require_fitted(self, "params_")
        stacked, _ = self._stack(features)
        if stacked.shape[0] != self.in_dim_:
            raise DataError(
                f"expected {self.in_dim_} stacked channels, "
                f"got {stacked.shape[0]}"
            )
        e_a, e_b = head_forward(self.params_, stacked)
        grid = evidence_from_logits(e_a, e_b)
        return grid.alpha / (grid.alpha + grid.beta)
