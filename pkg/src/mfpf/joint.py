"""Joint state-parameter estimation on the augmented state ``z = (x, theta)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as _m
from .errors import ConfigError
from .model import ModelSpec, NoiseBank


@dataclass(frozen=True)
class ParamDynamics:
    """``static`` (d theta = 0) or ``random_walk`` (d theta = sigma d chi)."""

    kind: str = "random_walk"
    sigma: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("static", "random_walk"):
            raise ConfigError(f"parameter dynamics must be 'static' or 'random_walk', got {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")

    @property
    def effective_sigma(self) -> float:
        return 0.0 if self.kind == "static" else float(self.sigma)


@dataclass(frozen=True)
class UniformPrior:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low, high = np.atleast_1d(np.asarray(self.low, float)), np.atleast_1d(np.asarray(self.high, float))
        if low.shape != high.shape or np.any(high < low):
            raise ConfigError("prior bounds must have equal shapes with low <= high")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def around(cls, truth, half_width=0.5):
        truth = np.asarray(truth, float)
        return cls(truth - half_width, truth + half_width)

    def sample(self, seed: int, count: int) -> np.ndarray:
        gen = _m.RngStream(seed, _m.PARAM_PRIOR).generator()
        return self.low + (self.high - self.low) * gen.random((count, self.low.size))


def augment(base: ModelSpec, dynamics: ParamDynamics | str = "random_walk", sigma: float | None = None) -> ModelSpec:
    """Augmented model over ``n + d`` dimensions.

    Drift ``(f(x, theta), 0)``, block-diagonal diffusion ``diag(g(x), sigma I_d)``
    and sensor ``h(x, theta)``.  The returned model ignores its ``params``
    argument: the parameters are read from the state.
    """
    if isinstance(dynamics, str):
        dynamics = ParamDynamics(dynamics, 1e-3 if sigma is None else sigma)
    d = base.param_dim
    if d < 1:
        raise ConfigError("augmentation needs at least one parameter")
    n, m = base.state_dim, base.noise_dim
    s = dynamics.effective_sigma

    def drift(Z, _params=None):
        out = np.zeros_like(Z)
        out[:, :n] = base.f(Z[:, :n], Z[:, n:])
        return out

    def diffusion(Z):
        G = np.zeros((Z.shape[0], n + d, m + d))
        G[:, :n, :m] = base.g(Z[:, :n])
        G[:, n:, m:] = s * np.eye(d)
        return G

    def sensor(Z, _params=None):
        return base.h(Z[:, :n], Z[:, n:])

    return ModelSpec(n + d, base.obs_dim, m + d, 0, drift, diffusion, sensor, base.obs_cov,
                     name=f"{base.name}+{dynamics.kind}")


def augmented_sampler(x0_mean, x0_cov, prior: UniformPrior):
    """Initial-ensemble sampler ``(seed, M) -> (M, n + d)`` for :func:`run_filter`."""
    x0_mean = np.atleast_1d(np.asarray(x0_mean, float))
    chol = np.linalg.cholesky(np.atleast_2d(x0_cov))

    def sample(seed, count):
        noise = NoiseBank(seed)
        x = x0_mean + noise.normal(_m.FILTER_INIT, count, x0_mean.size) @ chol.T
        return np.hstack([x, prior.sample(seed, count)])

    return sample


def extract_param_estimates(output, d: int) -> np.ndarray:
    """The last ``d`` components of the mean path, shape ``(N + 1, d)``."""
    means = output.means if hasattr(output, "means") else np.asarray(output)
    if d == 0:
        return means[:, :0]
    if d >= means.shape[1] or d < 0:
        raise ConfigError(f"cannot extract {d} parameters from a {means.shape[1]}-dimensional mean path")
    return means[:, -d:]
