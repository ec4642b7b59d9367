"""Input checking helpers and the package's error taxonomy.

Three error classes separate the failure modes the CLI reports with distinct
exit codes: bad configuration, bad data, and numerical breakdown during
optimization. Everything else raises plain ValueError/TypeError.
"""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(ValueError):
    """A dataset, scene, or tensor violates the documented contract."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the math guarantees finiteness."""


def as_float_array(x, name="array"):
    arr = np.asarray(x, dtype=float)
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    return arr


def check_finite(x, name="array"):
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def check_tensor3d(x, name="tensor", channels=None):
    """Validate a [channels, H, D] float tensor and return it as float64."""
    arr = as_float_array(x, name)
    if arr.ndim != 3:
        raise DataError(f"{name} must have shape [C, H, D], got ndim={arr.ndim}")
    if channels is not None and arr.shape[0] != channels:
        raise DataError(
            f"{name} has {arr.shape[0]} channels, expected {channels}"
        )
    return arr


def check_same_shape(a, b, name_a="a", name_b="b"):
    if np.shape(a) != np.shape(b):
        raise DataError(
            f"{name_a} and {name_b} must share a shape, "
            f"got {np.shape(a)} vs {np.shape(b)}"
        )


def check_positive_scalar(x, name="value"):
    if not np.isscalar(x) and np.ndim(x) != 0:
        raise ConfigError(f"{name} must be a scalar")
    if not np.isfinite(x) or x <= 0:
        raise ConfigError(f"{name} must be a positive finite number, got {x!r}")
    return float(x)


def check_nonnegative_scalar(x, name="value"):
    if not np.isfinite(x) or x < 0:
        raise ConfigError(f"{name} must be a non-negative finite number, got {x!r}")
    return float(x)


def check_unit_interval(x, name="value", open_ends=False):
    x = float(x)
    if open_ends:
        if not (0.0 < x < 1.0):
            raise ConfigError(f"{name} must lie strictly inside (0, 1), got {x}")
    elif not (0.0 <= x <= 1.0):
        raise ConfigError(f"{name} must lie in [0, 1], got {x}")
    return x


def check_probability_map(p, name="probability map"):
    arr = check_tensor3d(p, name)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DataError(f"{name} has entries outside [0, 1]")
    return arr
