"""Kalman-Bucy filter for the scalar linear-Gaussian model, used as the
reference the particle filters are checked against."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericalError
from .model import MeasurementIncrementPath


def kalman_bucy_oracle(a, b, c, Q, R, m0, P0, path: MeasurementIncrementPath):
    """Euler-discretised Kalman-Bucy filter.

    ``dm = (a m + b) dt + (P c / R)(dy - c m dt)``,
    ``dP = (2 a P + Q - P^2 c^2 / R) dt``.
    Returns ``(means, variances)`` at ``t_0 .. t_N``.
    """
    if R <= 0:
        raise ConfigError("R must be positive")
    if path.obs_dim != 1:
        raise ConfigError("the Kalman-Bucy oracle is scalar")
    dt = path.dt
    dy = path.increments[:, 0]
    N = len(dy)
    m = np.empty(N + 1)
    P = np.empty(N + 1)
    m[0], P[0] = m0, P0
    for n in range(N):
        K = P[n] * c / R
        m[n + 1] = m[n] + (a * m[n] + b) * dt + K * (dy[n] - c * m[n] * dt)
        P[n + 1] = P[n] + (2 * a * P[n] + Q - P[n] ** 2 * c**2 / R) * dt
        if P[n + 1] < 0:
            raise NumericalError("negative Kalman-Bucy variance", n + 1)
    return m, P


def stationary_variance(a, c, Q, R) -> float:
    """Positive root of ``2 a P + Q - c^2 P^2 / R = 0``."""
    if c == 0:
        if a >= 0:
            raise ConfigError("no stationary variance for an unobserved unstable model")
        return -Q / (2 * a)
    A = c * c / R
    return float((2 * a + np.sqrt(4 * a * a + 4 * A * Q)) / (2 * A))
