"""Input checks shared by the estimator layer and the CLI."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ConfigError


def check_increments(X, obs_dim: int | None = None) -> np.ndarray:
    """Measurement increments as a finite float array of shape ``(N, r)``.

    A 1-D input is read as a scalar observation sequence.
    """
    if np.ndim(X) == 1:
        X = np.reshape(np.asarray(X), (-1, 1))
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if obs_dim is not None and X.shape[1] != obs_dim:
        raise ValueError(f"increments have {X.shape[1]} columns, the model observes {obs_dim}")
    return X


def check_positive(value, name: str, integer: bool = False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ConfigError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    return int(seed)


def parse_filter_list(text: str, known) -> list:
    """Comma-separated filter names, checked against ``known``."""
    names = [t.strip().lower() for t in str(text).split(",") if t.strip()]
    if not names:
        raise ConfigError("empty filter list")
    bad = [n for n in names if n not in known]
    if bad:
        raise ConfigError(f"unknown filters {bad}; choose from {list(known)}")
    if len(set(names)) != len(names):
        raise ConfigError("filter list has duplicates")
    return names
