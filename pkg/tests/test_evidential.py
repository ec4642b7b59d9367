"""Evidential-loss correctness: closed forms, quadrature oracles, gradients.

Expected constants come from digamma/log-Gamma recurrence telescopes worked
by hand and frozen here as literals. Randomized sweeps compare the analytic
path against the scipy quadrature oracles in edlbev.oracles, which share no
code with the implementation under test.
"""

import math

import numpy as np
import pytest

from edlbev.evidential import (
    EvidenceGrid,
    LossConfig,
    TargetGrid,
    adjusted_evidence,
    bayes_risk_terms,
    beta_kl_to_uniform,
    combined_loss,
    combined_loss_grad,
    combined_loss_map,
    edl_detection_loss,
    edl_multilabel_loss,
    entropy_score,
    evidence_from_logits,
    gaussian_focal_loss,
    gaussian_focal_loss_grad,
    kl_regularizer,
    predict_prob,
    predict_uncertainty,
)
from edlbev.oracles import beta_expect_neglog, beta_kl_uniform_quad, fd_loss_grad
from edlbev.validation import DataError

# Hand-derived via psi recurrence telescopes:
#   KL(Beta(2,1) || Beta(1,1)) = ln 2 - 1/2
#   KL(Beta(3,1) || Beta(1,1)) = ln 3 - 2/3
#   E[-ln p | Beta(2,2)]       = psi(4) - psi(2) = 1/2 + 1/3
KL_21 = math.log(2.0) - 0.5
KL_31 = math.log(3.0) - 2.0 / 3.0
NEGLOG_22 = 5.0 / 6.0


def _grid(alpha, beta):
    a = np.asarray(alpha, dtype=float).reshape(1, 1, -1)
    b = np.asarray(beta, dtype=float).reshape(1, 1, -1)
    return EvidenceGrid(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _one_cell(alpha, beta, y, y_soft=None):
    grid = EvidenceGrid(np.full((1, 1, 1), float(alpha)),
                        np.full((1, 1, 1), float(beta)))
    yv = np.full((1, 1, 1), float(y))
    sv = yv.copy() if y_soft is None else np.full((1, 1, 1), float(y_soft))
    return grid, TargetGrid(y=yv, y_soft=sv)


def _random_pair(rng, shape, frac_pos=0.3):
    alpha = rng.uniform(1.05, 15.0, size=shape)
    beta = rng.uniform(1.05, 15.0, size=shape)
    y = (rng.random(shape) < frac_pos).astype(float)
    y_soft = np.maximum(y, rng.random(shape) * 0.95)
    return EvidenceGrid(alpha, beta), TargetGrid(y=y, y_soft=y_soft)


# ----------------------------------------------------- evidence transforms


def test_zero_logits_give_one_plus_ln2():
    zeros = np.zeros((2, 3, 3))
    grid = evidence_from_logits(zeros, zeros)
    np.testing.assert_allclose(grid.alpha, 1.0 + math.log(2.0), atol=1e-15)
    np.testing.assert_allclose(grid.beta, 1.0 + math.log(2.0), atol=1e-15)


def test_logit_asymptotes():
    e = np.zeros((1, 1, 2))
    e[0, 0, 0] = 100.0
    e[0, 0, 1] = -100.0
    grid = evidence_from_logits(e, np.zeros_like(e))
    assert grid.alpha[0, 0, 0] == pytest.approx(101.0, abs=1e-9)
    # softplus(-100) ~ 3.7e-44 is absorbed by the +1 shift in float64
    assert grid.alpha[0, 0, 1] == 1.0


def test_logit_shape_mismatch_rejected():
    with pytest.raises(DataError):
        evidence_from_logits(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_prob_and_uncertainty_ratios():
    grid = _grid([1.0 + 1e-12, 9.0, 1.0 + 1e-12], [1.0 + 1e-12, 1.0 + 1e-12, 9.0])
    p = predict_prob(grid)
    u = predict_uncertainty(grid)
    assert p[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert p[0, 0, 1] == pytest.approx(0.9, abs=1e-12)
    assert p[0, 0, 2] == pytest.approx(0.1, abs=1e-12)
    assert u[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
    assert u[0, 0, 1] == pytest.approx(0.1, abs=1e-12)


def test_uncertainty_strictly_decreases_in_evidence():
    base = predict_uncertainty(_grid([3.0], [4.0]))[0, 0, 0]
    more_a = predict_uncertainty(_grid([3.5], [4.0]))[0, 0, 0]
    more_b = predict_uncertainty(_grid([3.0], [4.5]))[0, 0, 0]
    assert more_a < base
    assert more_b < base


def test_evidence_grid_validation():
    good = np.full((1, 2, 2), 2.0)
    # positivity is the contract; sub-1 values are legal so the loss
    # functions can be probed over the full Beta parameter range
    EvidenceGrid(np.full((1, 2, 2), 0.5), good)
    with pytest.raises(DataError):
        EvidenceGrid(np.full((1, 2, 2), -1.0), good)
    with pytest.raises(DataError):
        EvidenceGrid(np.full((1, 2, 2), np.nan), good)
    with pytest.raises(DataError):
        EvidenceGrid(np.full((2, 2), 2.0), np.full((2, 2), 2.0))  # not 3-d


def test_target_grid_validation():
    y = np.zeros((1, 2, 2))
    y[0, 0, 0] = 1.0
    soft = y * 0.5  # violates y_soft == 1 where y == 1
    with pytest.raises(DataError):
        TargetGrid(y=y, y_soft=soft)
    with pytest.raises(DataError):
        TargetGrid(y=np.full((1, 2, 2), 0.3), y_soft=np.ones((1, 2, 2)))


# ------------------------------------------------------- Bayes-risk terms


def test_bayes_risk_uniform_prior_is_one():
    pos, neg = bayes_risk_terms(1.0, 1.0)
    assert pos == pytest.approx(1.0, abs=1e-12)
    assert neg == pytest.approx(1.0, abs=1e-12)


def test_bayes_risk_telescope():
    # psi(5) - psi(3) = 1/3 + 1/4
    pos, _ = bayes_risk_terms(3.0, 2.0)
    assert pos == pytest.approx(7.0 / 12.0, abs=1e-12)


def test_bayes_risk_symmetric_beta():
    pos, neg = bayes_risk_terms(2.0, 2.0)
    assert pos == pytest.approx(NEGLOG_22, abs=1e-12)
    assert neg == pytest.approx(NEGLOG_22, abs=1e-12)


def test_bayes_risk_matches_quadrature():
    rng = np.random.default_rng(201)
    ab = rng.uniform(0.5, 20.0, size=(100, 2))
    worst = 0.0
    for a, b in ab:
        pos, neg = bayes_risk_terms(a, b)
        worst = max(worst, abs(pos - beta_expect_neglog(a, b, "p")))
        worst = max(worst, abs(neg - beta_expect_neglog(a, b, "q")))
    assert worst < 1e-6


# ------------------------------------------------------------ KL to prior


def test_kl_exact_zero_at_uniform():
    assert beta_kl_to_uniform(1.0, 1.0) == 0.0


def test_kl_closed_forms():
    assert beta_kl_to_uniform(2.0, 1.0) == pytest.approx(KL_21, abs=1e-12)
    assert beta_kl_to_uniform(3.0, 1.0) == pytest.approx(KL_31, abs=1e-12)
    # symmetry of the divergence under alpha <-> beta against the flat prior
    assert beta_kl_to_uniform(1.0, 2.0) == pytest.approx(KL_21, abs=1e-12)


def test_kl_nonnegative_and_matches_quadrature():
    rng = np.random.default_rng(202)
    ab = rng.uniform(1.0, 20.0, size=(100, 2))
    worst = 0.0
    for a, b in ab:
        kl = float(beta_kl_to_uniform(a, b))
        assert kl >= 0.0
        worst = max(worst, abs(kl - beta_kl_uniform_quad(a, b)))
    assert worst < 1e-6


def test_kl_vectorizes():
    a = np.array([[1.0, 2.0], [3.0, 1.0]])
    b = np.ones_like(a)
    out = beta_kl_to_uniform(a, b)
    assert out.shape == (2, 2)
    assert out[0, 0] == 0.0
    assert out[0, 1] == pytest.approx(KL_21, abs=1e-12)
    assert out[1, 0] == pytest.approx(KL_31, abs=1e-12)


# ------------------------------------------------------------- loss values


def test_multilabel_loss_single_positive_cell():
    grid, target = _one_cell(1.0 + 1e-12, 1.0 + 1e-12, y=1.0)
    assert edl_multilabel_loss(grid, target) == pytest.approx(1.0, abs=1e-9)


def test_multilabel_loss_telescope_cell():
    grid, target = _one_cell(3.0, 2.0, y=1.0)
    assert edl_multilabel_loss(grid, target) == pytest.approx(7.0 / 12.0, abs=1e-12)


def test_multilabel_loss_nonnegative_and_sums():
    rng = np.random.default_rng(203)
    grid, target = _random_pair(rng, (3, 4, 4))
    total = edl_multilabel_loss(grid, target)
    assert total >= 0.0
    # summing two disjoint masks reproduces the unmasked total
    mask = np.zeros((3, 4, 4))
    mask[:, :2, :] = 1.0
    part = edl_multilabel_loss(grid, target, mask=mask)
    rest = edl_multilabel_loss(grid, target, mask=1.0 - mask)
    assert part + rest == pytest.approx(total, rel=1e-12)


def test_detection_loss_focal_cell():
    # y=1 at the uniform prior with gamma=2: (1 - 1/2)^2 * (psi(2)-psi(1))
    grid, target = _one_cell(1.0 + 1e-12, 1.0 + 1e-12, y=1.0)
    cfg = LossConfig(gamma=2.0, eta=0.0, reg_weight=0.0)
    assert edl_detection_loss(grid, target, cfg) == pytest.approx(0.25, abs=1e-9)


def test_detection_loss_center_vicinity_discount():
    # a y=0 cell sitting exactly on another object's center (y_soft = 1)
    # contributes nothing: the (1 - y_soft)^eta factor is exactly zero
    grid, target = _one_cell(5.0, 2.0, y=0.0, y_soft=1.0)
    cfg = LossConfig(gamma=2.0, eta=4.0, reg_weight=0.0)
    assert edl_detection_loss(grid, target, cfg) == 0.0


def test_detection_reduces_to_multilabel_at_zero_exponents():
    rng = np.random.default_rng(204)
    cfg = LossConfig(gamma=0.0, eta=0.0, reg_weight=0.0)
    for _ in range(50):
        grid, target = _random_pair(rng, (2, 5, 5))
        full = edl_detection_loss(grid, target, cfg)
        plain = edl_multilabel_loss(grid, target)
        assert abs(full - plain) <= 1e-12 * max(1.0, abs(plain))


def test_adjusted_evidence_substitution():
    grid, target = _one_cell(3.0, 2.0, y=1.0)
    adj = adjusted_evidence(grid, target)
    assert adj.alpha[0, 0, 0] == 1.0
    assert adj.beta[0, 0, 0] == 2.0
    grid0, target0 = _one_cell(3.0, 2.0, y=0.0)
    adj0 = adjusted_evidence(grid0, target0)
    assert adj0.alpha[0, 0, 0] == 3.0
    assert adj0.beta[0, 0, 0] == 1.0


def test_adjusted_evidence_fixed_point_at_prior():
    for y in (0.0, 1.0):
        grid, target = _one_cell(1.0, 1.0, y=y)
        adj = adjusted_evidence(grid, target)
        assert adj.alpha[0, 0, 0] == 1.0
        assert adj.beta[0, 0, 0] == 1.0


def test_false_positive_evidence_raises_regularizer():
    # with y=0 the adjusted pair is (alpha, 1); pushing alpha up must
    # strictly increase the divergence from the flat prior
    last = -1.0
    for alpha in (1.5, 2.5, 4.0, 8.0):
        grid, target = _one_cell(alpha, 6.0, y=0.0)
        kl = kl_regularizer(adjusted_evidence(grid, target))
        assert kl > last
        last = kl


def test_combined_loss_additivity():
    rng = np.random.default_rng(205)
    cfg = LossConfig(gamma=2.0, eta=4.0, reg_weight=1e-4)
    grid, target = _random_pair(rng, (2, 4, 4))
    combined = combined_loss(grid, target, cfg)
    parts = edl_detection_loss(grid, target, cfg) + cfg.reg_weight * kl_regularizer(
        adjusted_evidence(grid, target)
    )
    assert combined == pytest.approx(parts, rel=1e-12)
    cfg0 = LossConfig(gamma=2.0, eta=4.0, reg_weight=0.0)
    assert combined_loss(grid, target, cfg0) == edl_detection_loss(grid, target, cfg0)


def test_combined_loss_map_sums_to_total():
    rng = np.random.default_rng(206)
    cfg = LossConfig(gamma=2.0, eta=4.0, reg_weight=1e-3)
    grid, target = _random_pair(rng, (2, 3, 5))
    cell_map = combined_loss_map(grid, target, cfg)
    assert cell_map.shape == grid.alpha.shape
    assert np.all(cell_map >= 0.0)
    assert float(cell_map.sum()) == pytest.approx(
        combined_loss(grid, target, cfg), rel=1e-12
    )


# ---------------------------------------------------------------- gradients


def test_gradient_closed_form_plain_positive():
    # lambda=0, gamma=eta=0, y=1: dL/dalpha = psi'(s) - psi'(alpha),
    # dL/dbeta = psi'(s)
    from edlbev.specfun import trigamma

    grid, target = _one_cell(3.0, 2.0, y=1.0)
    cfg = LossConfig(gamma=0.0, eta=0.0, reg_weight=0.0)
    da, db = combined_loss_grad(grid, target, cfg)
    s = 5.0
    assert da[0, 0, 0] == pytest.approx(trigamma(s) - trigamma(3.0), rel=1e-12)
    assert db[0, 0, 0] == pytest.approx(trigamma(s), rel=1e-12)


def test_gradient_vanishes_for_confident_positive():
    # y=1 with alpha huge: the focal factor (1-p)^gamma kills the gradient
    grid, target = _one_cell(5000.0, 2.0, y=1.0)
    cfg = LossConfig(gamma=2.0, eta=0.0, reg_weight=0.0)
    da, db = combined_loss_grad(grid, target, cfg)
    assert abs(da[0, 0, 0]) < 1e-5
    assert abs(db[0, 0, 0]) < 1e-5


def test_gradients_match_finite_differences_across_configs():
    rng = np.random.default_rng(207)
    worst = 0.0
    for gamma in (0.0, 1.0, 2.0):
        for eta in (0.0, 2.0, 4.0):
            for lam in (0.0, 1e-4, 1e-2):
                cfg = LossConfig(gamma=gamma, eta=eta, reg_weight=lam)
                grid, target = _random_pair(rng, (2, 3, 3))
                da, db = combined_loss_grad(grid, target, cfg)
                fa, fb = fd_loss_grad(grid, target, cfg)
                for analytic, numeric in ((da, fa), (db, fb)):
                    denom = np.maximum(
                        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
                    )
                    worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    assert worst < 1e-4


# ------------------------------------------------------- baselines, entropy


def test_entropy_score_values():
    p = np.array([[[0.5, 0.999]]])
    h = entropy_score(p)
    assert h[0, 0, 0] == pytest.approx(math.log(2.0), abs=1e-12)
    assert h[0, 0, 1] < 0.01


def test_entropy_symmetry():
    rng = np.random.default_rng(208)
    p = rng.uniform(0.01, 0.99, size=50)
    np.testing.assert_allclose(entropy_score(p), entropy_score(1.0 - p), atol=1e-12)


def test_entropy_rejects_closed_interval():
    with pytest.raises(DataError):
        entropy_score(np.array([0.0, 0.5]))
    with pytest.raises(DataError):
        entropy_score(np.array([0.5, 1.0]))


def test_gaussian_focal_matches_finite_differences():
    rng = np.random.default_rng(209)
    shape = (2, 3, 3)
    y = (rng.random(shape) < 0.3).astype(float)
    y_soft = np.maximum(y, rng.random(shape) * 0.9)
    target = TargetGrid(y=y, y_soft=y_soft)
    cfg = LossConfig(gamma=2.0, eta=4.0, reg_weight=0.0)
    p = rng.uniform(0.05, 0.95, size=shape)
    analytic = gaussian_focal_loss_grad(p, target, cfg)
    step = 1e-6
    fd = np.zeros_like(p)
    flat, fd_flat = p.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = gaussian_focal_loss(p, target, cfg)
        flat[i] = orig - step
        lo = gaussian_focal_loss(p, target, cfg)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * step)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_gaussian_focal_perfect_prediction_is_cheap():
    y = np.ones((1, 1, 1))
    target = TargetGrid(y=y, y_soft=y.copy())
    cfg = LossConfig(gamma=2.0, eta=4.0, reg_weight=0.0)
    near = gaussian_focal_loss(np.full((1, 1, 1), 0.999), target, cfg)
    far = gaussian_focal_loss(np.full((1, 1, 1), 0.5), target, cfg)
    assert near < far
