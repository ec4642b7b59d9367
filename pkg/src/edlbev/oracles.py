"""Independent reference implementations used to cross-check the analytic path.

Nothing here touches the package's own special functions: the Beta density is
normalized with scipy's betaln and integrals run through QUADPACK's adaptive
Gauss-Kronrod scheme. An endpoint substitution (p = u^2 on the left half,
1 - p = v^2 on the right) soaks up the integrable singularities that appear
when a Beta parameter drops below 1.

The `run_*_suite` functions back the CLI selftest; the test suite calls the
same integrators directly.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate
from scipy.special import betaln

from .evidential import (
    EvidenceGrid,
    LossConfig,
    TargetGrid,
    bayes_risk_terms,
    beta_kl_to_uniform,
    combined_loss,
    combined_loss_grad,
)

_QUAD_OPTS = dict(epsabs=1e-10, epsrel=1e-10, limit=200)


def _beta_log_density(log_p, log_q, a, b):
    return (a - 1.0) * log_p + (b - 1.0) * log_q - betaln(a, b)


def _integrate_unit_interval(fn):
    """Integrate fn(log_p, log_q) over p in (0, 1), split at 1/2 with
    square-root endpoint substitutions. Both logs are computed through the
    substitution variable (2 ln u near 0, 2 ln v near 1), so the adaptive
    refinement toward an integrable singularity never sees a p that has
    already rounded to 0 or 1."""
    half = np.sqrt(0.5)

    def left(u):
        p = u * u
        return fn(2.0 * np.log(u), np.log1p(-p)) * 2.0 * u

    def right(v):
        q = v * v
        return fn(np.log1p(-q), 2.0 * np.log(v)) * 2.0 * v

    lo, _ = integrate.quad(left, 0.0, half, **_QUAD_OPTS)
    hi, _ = integrate.quad(right, 0.0, half, **_QUAD_OPTS)
    return lo + hi


def beta_expect_neglog(a, b, side="p"):
    """E[-ln p] (side="p") or E[-ln(1-p)] (side="q") under Beta(a, b)."""
    if side not in ("p", "q"):
        raise ValueError(f"side must be 'p' or 'q', got {side!r}")

    def integrand(log_p, log_q):
        logpdf = _beta_log_density(log_p, log_q, a, b)
        g = -log_p if side == "p" else -log_q
        return g * np.exp(logpdf)

    return _integrate_unit_interval(integrand)


def beta_kl_uniform_quad(a, b):
    """KL(Beta(a, b) || Beta(1, 1)) by quadrature of f ln f."""

    def integrand(log_p, log_q):
        logpdf = _beta_log_density(log_p, log_q, a, b)
        # f ln f -> 0 as f -> 0; exp(L) * L realizes that limit cleanly.
        return np.exp(logpdf) * logpdf

    return _integrate_unit_interval(integrand)


def run_quadrature_suite(n=100, seed=20240) -> dict:
    """Compare analytic Bayes-risk terms and the KL closed form against
    quadrature on random parameter draws. Returns max absolute errors."""
    rng = np.random.default_rng(seed)
    ab_loss = rng.uniform(0.5, 20.0, size=(n, 2))
    ab_kl = rng.uniform(1.0, 20.0, size=(n, 2))

    worst_pos = 0.0
    worst_neg = 0.0
    for a, b in ab_loss:
        pos, neg = bayes_risk_terms(a, b)
        worst_pos = max(worst_pos, abs(pos - beta_expect_neglog(a, b, "p")))
        worst_neg = max(worst_neg, abs(neg - beta_expect_neglog(a, b, "q")))

    worst_kl = 0.0
    for a, b in ab_kl:
        kl = float(beta_kl_to_uniform(a, b))
        worst_kl = max(worst_kl, abs(kl - beta_kl_uniform_quad(a, b)))

    return {
        "n": int(n),
        "max_abs_err_pos_term": worst_pos,
        "max_abs_err_neg_term": worst_neg,
        "max_abs_err_kl": worst_kl,
    }


def fd_loss_grad(grid: EvidenceGrid, target: TargetGrid, cfg: LossConfig,
                 step=1e-5):
    """Central finite differences of `combined_loss` in (alpha, beta)."""
    d_alpha = np.zeros_like(grid.alpha)
    d_beta = np.zeros_like(grid.beta)
    # EvidenceGrid wraps its arrays without copying, so in-place perturbation
    # of grid.alpha/grid.beta is visible to combined_loss.
    for arr, out in ((grid.alpha, d_alpha), (grid.beta, d_beta)):
        flat = arr.reshape(-1)
        out_flat = out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = combined_loss(grid, target, cfg)
            flat[i] = orig - step
            lo = combined_loss(grid, target, cfg)
            flat[i] = orig
            out_flat[i] = (hi - lo) / (2.0 * step)
    return d_alpha, d_beta


def run_fd_suite(n_grids=10, shape=(2, 3, 3), seed=20241, step=1e-5) -> dict:
    """Max relative error of analytic (alpha, beta) gradients against central
    finite differences over random small grids and loss settings."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    configs = [
        LossConfig(gamma=0.0, eta=0.0, reg_weight=0.0),
        LossConfig(gamma=2.0, eta=4.0, reg_weight=0.0),
        LossConfig(gamma=2.0, eta=4.0, reg_weight=1e-2),
    ]
    for _ in range(n_grids):
        alpha = rng.uniform(1.05, 8.0, size=shape)
        beta = rng.uniform(1.05, 8.0, size=shape)
        y = (rng.random(shape) < 0.3).astype(float)
        y_soft = np.maximum(y, rng.random(shape) * 0.9)
        grid = EvidenceGrid(alpha, beta)
        target = TargetGrid(y=y, y_soft=y_soft)
        for cfg in configs:
            da, db = combined_loss_grad(grid, target, cfg)
            fa, fb = fd_loss_grad(grid, target, cfg, step=step)
            for analytic, numeric in ((da, fa), (db, fb)):
                denom = np.maximum(
                    np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
                )
                worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return {"n_grids": int(n_grids), "max_rel_err": worst}
