"""scikit-learn style wrappers.

The "samples" are measurement increments: ``X`` has one row per time step
(``dy`` over ``[t_n, t_n + dt]``).  ``fit`` runs the filter over the whole
path; ``predict`` returns the filtered state mean after each increment, so
its rows line up with the rows of ``X``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model as _m
from ._validation import check_increments, check_positive, check_seed
from .errors import ConfigError
from .filters import DEFAULT_PARTICLES, FILTERS, FilterConfig, run_filter
from .joint import ParamDynamics, UniformPrior, augment, augmented_sampler, extract_param_estimates
from .model import MeasurementIncrementPath, get_preset


class ParticleFilter(BaseEstimator):
    """Filter a measurement-increment path with a model whose parameters are known.

    Parameters
    ----------
    filter : one of ``enkbf, bpf, fpf, etpf, spf, rspf``
    preset : model preset name
    model_params : dict of preset overrides (e.g. ``{"a": -0.2}``)
    n_particles : ensemble size; None takes the per-filter default
    dt : time step of the increments
    gain : dict of gain settings (``method``, ``epsilon``, ``metric``, ...)
    k, g : Sinkhorn filter replication factor and kernel scale
    weights_use_R : R-scaled likelihood weights
    seed : noise seed
    """

    def __init__(self, filter="enkbf", preset="scalar_lg", model_params=None, n_particles=None, dt=0.02,
                 gain=None, k=1, g=None, weights_use_R=True, seed=0):
        self.filter = filter
        self.preset = preset
        self.model_params = model_params
        self.n_particles = n_particles
        self.dt = dt
        self.gain = gain
        self.k = k
        self.g = g
        self.weights_use_R = weights_use_R
        self.seed = seed

    def _filter_config(self) -> FilterConfig:
        if self.filter not in FILTERS:
            raise ConfigError(f"unknown filter {self.filter!r}; choose from {FILTERS}")
        M = DEFAULT_PARTICLES[self.filter] if self.n_particles is None else self.n_particles
        check_positive(M, "n_particles", integer=True)
        return FilterConfig.from_dict({"n_particles": int(M), "gain": dict(self.gain or {}), "k": self.k,
                                       "g": self.g, "weights_use_R": self.weights_use_R})

    def _setup(self):
        preset = get_preset(self.preset, **dict(self.model_params or {}))
        model, params = preset.model, preset.params
        sampler = lambda seed, count: preset.sample_x0(seed, count, source=_m.FILTER_INIT)  # noqa: E731
        return preset, model, params, sampler

    def fit(self, X, y=None):
        check_positive(self.dt, "dt")
        seed = check_seed(self.seed)
        cfg = self._filter_config()
        preset, model, params, sampler = self._setup()
        X = check_increments(X, model.obs_dim)
        self.n_features_in_ = X.shape[1]
        path = MeasurementIncrementPath(0.0, float(self.dt), X)
        self.output_ = run_filter(self.filter, model, params, sampler, path, cfg, seed=seed)
        self.times_ = self.output_.times
        self.means_ = self.output_.means
        self.variances_ = self.output_.variances
        self._after_fit(preset)
        return self

    def _after_fit(self, preset):
        pass

    def predict(self, X=None):
        """Filtered state means at ``t_1 .. t_N``; with ``X`` the filter is refit first."""
        if X is not None:
            self.fit(X)
        check_is_fitted(self, "output_")
        return self._state_part(self.means_[1:])

    def transform(self, X):
        return self.fit(X).predict()

    def fit_transform(self, X, y=None):
        return self.transform(X)

    def _state_part(self, a):
        return a

    def score(self, X, y):
        """Negative RMSE of the filtered mean against the true states ``y`` at ``t_1 .. t_N``."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=float).reshape(pred.shape)
        return -float(np.sqrt(np.mean((pred - y) ** 2)))


class JointStateParameterEstimator(ParticleFilter):
    """Estimate the state and the model parameters together on the augmented
    state ``(x, theta)``.

    Extra parameters: ``dynamics`` (``static`` or ``random_walk``), ``sigma``,
    ``prior_low``/``prior_high`` (default: truth +/- 0.5) and ``burn_in``;
    after fitting ``params_`` holds the median of the parameter estimates over
    ``t > burn_in``.
    """

    def __init__(self, filter="enkbf", preset="scalar_lg", model_params=None, n_particles=None, dt=0.02,
                 gain=None, k=1, g=None, weights_use_R=True, seed=0, dynamics="random_walk", sigma=1e-3,
                 prior_low=None, prior_high=None, burn_in=30.0):
        super().__init__(filter, preset, model_params, n_particles, dt, gain, k, g, weights_use_R, seed)
        self.dynamics = dynamics
        self.sigma = sigma
        self.prior_low = prior_low
        self.prior_high = prior_high
        self.burn_in = burn_in

    def _setup(self):
        preset = get_preset(self.preset, **dict(self.model_params or {}))
        if (self.prior_low is None) != (self.prior_high is None):
            raise ConfigError("prior_low and prior_high go together")
        if self.prior_low is None:
            prior = UniformPrior.around(preset.params, 0.5)
        else:
            prior = UniformPrior(self.prior_low, self.prior_high)
        if prior.low.size != preset.model.param_dim:
            raise ConfigError(f"prior has {prior.low.size} entries, model has {preset.model.param_dim} parameters")
        model = augment(preset.model, ParamDynamics(self.dynamics, self.sigma))
        return preset, model, None, augmented_sampler(preset.x0_mean, preset.x0_cov, prior)

    def _after_fit(self, preset):
        d = preset.model.param_dim
        self.n_state_ = preset.model.state_dim
        self.param_path_ = extract_param_estimates(self.output_, d)
        sel = self.times_ > self.burn_in
        if not np.any(sel):
            sel = np.ones_like(self.times_, dtype=bool)
        self.params_ = np.median(self.param_path_[sel], axis=0)

    def _state_part(self, a):
        return a[:, : self.n_state_]
