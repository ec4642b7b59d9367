"""Numerically stable special functions on the positive half-line.

Everything here is written against float64 and vectorizes over numpy arrays;
scalars come back as Python floats. The gamma-family functions share one
scheme: an unconditional 8-step recurrence pushes the argument to >= 8, where
the classical asymptotic (de Moivre / Stirling) series converges far past the
accuracy targets. The fixed shift keeps the code branch-free, which matters
because these run inside the training loss on full [C, H, D] grids.
"""

from __future__ import annotations

import numpy as np

_SHIFT = 8

_LN_SQRT_2PI = 0.9189385332046727417803297  # ln(2*pi)/2

# Stirling series for ln Gamma: sum_n B_2n / (2n(2n-1) x^(2n-1)).
_LGAMMA_COEF = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)

# Asymptotic series for psi: ln x - 1/(2x) - sum_n B_2n / (2n x^(2n)).
_DIGAMMA_COEF = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# Asymptotic series for psi': 1/x + 1/(2x^2) + sum_n B_2n / x^(2n+1).
_TRIGAMMA_COEF = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def _positive_array(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError(f"{name} requires strictly positive finite arguments")
    return arr


def _maybe_scalar(out, x):
    if np.ndim(x) == 0:
        return float(out)
    return out


def _horner(coef, r):
    acc = np.zeros_like(r)
    for c in reversed(coef):
        acc = acc * r + c
    return acc


def log_gamma(x):
    """ln Gamma(x) for x > 0."""
    arr = _positive_array(x, "log_gamma")
    z = arr + _SHIFT
    r = 1.0 / (z * z)
    out = (z - 0.5) * np.log(z) - z + _LN_SQRT_2PI + _horner(_LGAMMA_COEF, r) / z
    # Gamma(x) = Gamma(x + 8) / (x (x+1) ... (x+7))
    for k in range(_SHIFT):
        out = out - np.log(arr + k)
    return _maybe_scalar(out, x)


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    arr = _positive_array(x, "digamma")
    z = arr + _SHIFT
    r = 1.0 / (z * z)
    out = np.log(z) - 0.5 / z - _horner(_DIGAMMA_COEF, r) * r
    # psi(x) = psi(x + 8) - sum_k 1/(x + k)
    for k in range(_SHIFT):
        out = out - 1.0 / (arr + k)
    return _maybe_scalar(out, x)


def trigamma(x):
    """psi'(x), the derivative of digamma, for x > 0."""
    arr = _positive_array(x, "trigamma")
    z = arr + _SHIFT
    r = 1.0 / (z * z)
    out = 1.0 / z + 0.5 * r + _horner(_TRIGAMMA_COEF, r) * r / z
    # psi'(x) = psi'(x + 8) + sum_k 1/(x + k)^2
    for k in range(_SHIFT):
        xk = arr + k
        out = out + 1.0 / (xk * xk)
    return _maybe_scalar(out, x)


def log_beta(a, b):
    """ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b).

    Symmetric under a <-> b down to the last bit: both orders evaluate the
    same commutative float expressions.
    """
    a_arr = _positive_array(a, "log_beta")
    b_arr = _positive_array(b, "log_beta")
    out = log_gamma(a_arr) + log_gamma(b_arr) - log_gamma(a_arr + b_arr)
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return float(out)
    return out


def softplus(x):
    """ln(1 + e^x), overflow-safe: for x > 0 computed as x + ln(1 + e^-x)."""
    arr = np.asarray(x, dtype=float)
    out = np.maximum(arr, 0.0) + np.log1p(np.exp(-np.abs(arr)))
    return _maybe_scalar(out, x)


def sigmoid(x):
    """1 / (1 + e^-x); the derivative of softplus. Overflow-safe both ways."""
    arr = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _maybe_scalar(out, x)
