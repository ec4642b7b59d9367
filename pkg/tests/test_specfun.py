"""Special-function accuracy tests.

The expected values below are classical closed forms (Euler-Mascheroni
constant, zeta(2), factorial identities) frozen to full float64 precision,
plus randomized cross-checks against mpmath evaluated at 50 digits. The
implementation under test must never be used to generate its own expected
values, so everything here is either a literal or an mpmath call.
"""

import math

import mpmath
import numpy as np
import pytest

from edlbev.specfun import digamma, log_beta, log_gamma, sigmoid, softplus, trigamma

mpmath.mp.dps = 50

EULER_GAMMA = 0.5772156649015328606
LN_SQRT_PI = 0.5723649429247000870  # ln Gamma(1/2) = ln sqrt(pi)
ZETA_2 = 1.6449340668482264365  # pi^2 / 6


# ---------------------------------------------------------------- log_gamma


def test_log_gamma_at_one_is_zero():
    assert log_gamma(1.0) == pytest.approx(0.0, abs=1e-14)


def test_log_gamma_factorials():
    # Gamma(n) = (n-1)!
    for n, fact in ((2, 1), (3, 2), (5, 24), (8, 5040)):
        assert log_gamma(float(n)) == pytest.approx(math.log(fact), abs=1e-12)


def test_log_gamma_half():
    assert log_gamma(0.5) == pytest.approx(LN_SQRT_PI, abs=1e-12)


def test_log_gamma_against_mpmath():
    rng = np.random.default_rng(101)
    xs = np.concatenate([
        rng.uniform(1e-3, 1.0, 40),
        rng.uniform(1.0, 50.0, 40),
        rng.uniform(50.0, 1e6, 20),
    ])
    for x in xs:
        ref = float(mpmath.loggamma(mpmath.mpf(x)))
        # ln Gamma grows to ~1.3e7 over this range, so a flat absolute
        # tolerance is unrepresentable in float64; allow a few ulp on top.
        tol = max(1e-12, 4.0 * abs(ref) * np.finfo(float).eps)
        assert abs(log_gamma(float(x)) - ref) < tol, f"x={x}"


def test_log_gamma_finite_over_range():
    xs = np.geomspace(1e-3, 1e6, 400)
    out = log_gamma(xs)
    assert np.all(np.isfinite(out))


# ------------------------------------------------------------------ digamma


def test_digamma_at_one_is_minus_euler_gamma():
    assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-10)


def test_digamma_at_half():
    # psi(1/2) = -gamma - 2 ln 2
    expected = -EULER_GAMMA - 2.0 * math.log(2.0)
    assert digamma(0.5) == pytest.approx(expected, abs=1e-10)


def test_digamma_at_two():
    # psi(2) = 1 - gamma by the recurrence
    assert digamma(2.0) == pytest.approx(1.0 - EULER_GAMMA, abs=1e-10)


def test_digamma_recurrence_residuals():
    # psi(x+1) = psi(x) + 1/x, checked over the working range
    rng = np.random.default_rng(102)
    x = rng.uniform(1e-6, 50.0, 1000) + 1e-9
    resid = digamma(x + 1.0) - digamma(x) - 1.0 / x
    assert np.max(np.abs(resid)) < 1e-10


def test_digamma_against_mpmath():
    rng = np.random.default_rng(103)
    xs = np.concatenate([
        rng.uniform(1e-3, 2.0, 40),
        rng.uniform(2.0, 100.0, 40),
        rng.uniform(100.0, 1e6, 20),
    ])
    for x in xs:
        ref = float(mpmath.digamma(mpmath.mpf(x)))
        assert abs(digamma(float(x)) - ref) < 1e-10, f"x={x}"


# ----------------------------------------------------------------- trigamma


def test_trigamma_at_one_is_zeta_two():
    assert trigamma(1.0) == pytest.approx(ZETA_2, abs=1e-8)


def test_trigamma_at_half():
    # psi'(1/2) = pi^2 / 2
    assert trigamma(0.5) == pytest.approx(math.pi ** 2 / 2.0, abs=1e-8)


def test_trigamma_recurrence():
    # psi'(x+1) = psi'(x) - 1/x^2
    rng = np.random.default_rng(104)
    x = rng.uniform(0.1, 50.0, 1000)
    resid = trigamma(x + 1.0) - trigamma(x) + 1.0 / (x * x)
    assert np.max(np.abs(resid)) < 1e-10


def test_trigamma_is_derivative_of_digamma():
    rng = np.random.default_rng(105)
    x = rng.uniform(0.5, 80.0, 100)
    h = 1e-5
    fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h)
    rel = np.abs(trigamma(x) - fd) / np.abs(fd)
    assert np.max(rel) < 1e-5


def test_trigamma_against_mpmath():
    rng = np.random.default_rng(106)
    xs = np.concatenate([
        rng.uniform(1e-3, 2.0, 30),
        rng.uniform(2.0, 1e3, 30),
    ])
    for x in xs:
        ref = float(mpmath.polygamma(1, mpmath.mpf(x)))
        assert abs(trigamma(float(x)) - ref) < 1e-8, f"x={x}"


# ----------------------------------------------------------------- log_beta


def test_log_beta_ones():
    assert log_beta(1.0, 1.0) == pytest.approx(0.0, abs=1e-14)


def test_log_beta_integer_identity():
    # B(2,3) = 1!*2!/4! = 1/12
    assert log_beta(2.0, 3.0) == pytest.approx(math.log(1.0 / 12.0), abs=1e-12)


def test_log_beta_symmetric_bitwise():
    rng = np.random.default_rng(107)
    for _ in range(50):
        a, b = rng.uniform(0.1, 40.0, 2)
        assert log_beta(a, b) == log_beta(b, a)


def test_log_beta_against_mpmath():
    rng = np.random.default_rng(108)
    for _ in range(40):
        a, b = rng.uniform(0.05, 60.0, 2)
        ref = float(mpmath.log(mpmath.beta(mpmath.mpf(a), mpmath.mpf(b))))
        assert abs(log_beta(float(a), float(b)) - ref) < 1e-11


# --------------------------------------------------------- softplus/sigmoid


def test_softplus_at_zero():
    assert softplus(0.0) == pytest.approx(math.log(2.0), abs=1e-15)


def test_softplus_tails():
    assert 0.0 < softplus(-100.0) < 1e-40
    assert softplus(100.0) == pytest.approx(100.0, abs=1e-12)
    # no overflow far out either
    assert np.isfinite(softplus(1e4))


def test_softplus_monotone_positive():
    x = np.linspace(-30.0, 30.0, 2001)
    s = softplus(x)
    assert np.all(s > 0.0)
    assert np.all(np.diff(s) > 0.0)


def test_sigmoid_matches_softplus_derivative():
    x = np.linspace(-20.0, 20.0, 500)
    h = 1e-6
    fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h)
    np.testing.assert_allclose(sigmoid(x), fd, atol=1e-9)


def test_sigmoid_complement():
    rng = np.random.default_rng(109)
    x = rng.uniform(-60.0, 60.0, 200)
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)


# ------------------------------------------------------- domains and shapes


@pytest.mark.parametrize("fn", [log_gamma, digamma, trigamma])
@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan, math.inf])
def test_gamma_family_rejects_nonpositive(fn, bad):
    with pytest.raises(ValueError):
        fn(bad)


def test_log_beta_rejects_nonpositive():
    with pytest.raises(ValueError):
        log_beta(0.0, 1.0)
    with pytest.raises(ValueError):
        log_beta(1.0, -2.0)


def test_scalar_in_scalar_out():
    for fn in (log_gamma, digamma, trigamma, softplus, sigmoid):
        assert isinstance(fn(1.5), float)


def test_array_shape_roundtrip():
    x = np.full((3, 4), 2.5)
    for fn in (log_gamma, digamma, trigamma, softplus, sigmoid):
        out = fn(x)
        assert isinstance(out, np.ndarray)
        assert out.shape == (3, 4)
        # vectorized result agrees with the scalar path
        assert out[0, 0] == pytest.approx(fn(2.5), abs=0.0)


def test_all_functions_finite_over_working_range():
    xs = np.geomspace(1e-3, 1e6, 300)
    for fn in (log_gamma, digamma, trigamma):
        assert np.all(np.isfinite(fn(xs)))
    assert np.all(np.isfinite(softplus(np.linspace(-700, 700, 100))))
    assert np.all(np.isfinite(sigmoid(np.linspace(-700, 700, 100))))
