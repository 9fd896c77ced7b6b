"""Step operators for the continuous-time particle filters and the loop that
runs them over a measurement path.

Every step maps the filter state at ``t_n`` and the increment ``dy`` over
``[t_n, t_{n+1}]`` to the filter state at ``t_{n+1}``:

* ``enkbf`` - ensemble Kalman-Bucy filter with perturbed innovation
* ``fpf``   - feedback particle filter with stochastically perturbed innovation
* ``bpf``   - bootstrap particle filter with systematic resampling
* ``etpf``  - ensemble transform particle filter (exact transport)
* ``spf``   - Sinkhorn particle filter
* ``rspf``  - resampling Sinkhorn particle filter
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as _m
from .errors import ConfigError, MFPFError, NumericalError
from .gain import GainConvergenceWarning, compute_gain, constant_gain
from .model import ModelSpec, MeasurementIncrementPath, NoiseBank
from .transport import (
    exact_transport,
    gibbs_kernel,
    plan_resample,
    sinkhorn,
    squared_distances,
    transform_particles,
)

FILTERS = ("enkbf", "bpf", "fpf", "etpf", "spf", "rspf")

# default particle counts (ETPF's exact transport is the expensive one)
DEFAULT_PARTICLES = {"enkbf": 1000, "bpf": 1000, "fpf": 1000, "etpf": 100, "spf": 1000, "rspf": 1000}


@dataclass
class Ensemble:
    states: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] < 1:
            raise ConfigError("ensemble needs at least one particle")

    @property
    def size(self) -> int:
        return self.states.shape[0]


@dataclass
class FilterState:
    ensemble: Ensemble
    weights: np.ndarray
    noise: NoiseBank
    step: int = 0
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, states, noise, t0: float = 0.0):
        ens = Ensemble(states, t0)
        return cls(ens, np.full(ens.size, 1.0 / ens.size), noise)

    @property
    def states(self) -> np.ndarray:
        return self.ensemble.states

    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    def variance(self) -> np.ndarray:
        d = self.states - self.mean()
        return self.weights @ (d * d)

    def advance(self, states, dt, weights=None, **diagnostics):
        M = states.shape[0]
        w = np.full(M, 1.0 / M) if weights is None else weights
        return replace(
            self,
            ensemble=Ensemble(states, self.ensemble.time + dt),
            weights=w,
            step=self.step + 1,
            diagnostics={**self.diagnostics, **diagnostics},
        )


@dataclass
class FilterConfig:
    """Tunables shared by the step operators; unused fields are ignored."""

    n_particles: int = 1000
    gain_method: str = "constant"
    epsilon: float | None = None
    max_iters: int = 1000
    gain_tol: float = 1e-8
    gain_fallback: bool = True
    gain_metric: str = "euclidean"
    ess_threshold: float = 0.5
    k: int = 1
    g: float | str | None = None
    sinkhorn_tol: float = 1e-8
    sinkhorn_max_iter: int = 10_000
    strict: bool = False
    weights_use_R: bool = True

    @classmethod
    def from_dict(cls, d: dict | None):
        d = dict(d or {})
        gain = d.pop("gain", None) or {}
        key_map = {"method": "gain_method", "epsilon": "epsilon", "max_iters": "max_iters", "tol": "gain_tol",
                   "fallback": "gain_fallback", "metric": "gain_metric"}
        for key, value in gain.items():
            if key not in key_map:
                raise ConfigError(f"unknown gain key {key!r}")
            d[key_map[key]] = value
        spf = d.pop("spf", None) or {}
        for key, value in spf.items():
            if key != "weights_use_R":
                raise ConfigError(f"unknown spf key {key!r}")
            d["weights_use_R"] = bool(value)
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown filter settings {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.gain_method not in ("constant", "kernel"):
            raise ConfigError(f"gain.method must be 'constant' or 'kernel', got {self.gain_method!r}")
        if self.gain_metric not in ("euclidean", "whitened"):
            raise ConfigError(f"gain.metric must be 'euclidean' or 'whitened', got {self.gain_metric!r}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("gain.epsilon must be positive")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 <= self.ess_threshold <= 1:
            raise ConfigError("ess_threshold must lie in [0, 1]")
        if isinstance(self.g, str) and self.g != "auto":
            raise ConfigError("g must be a positive number, 'auto' or null")
        if isinstance(self.g, (int, float)) and not self.g > 0:
            raise ConfigError("g must be positive")


# ---------------------------------------------------------------------------
# weights


def log_likelihood_increment(H, dy, dt, R, use_R=True) -> np.ndarray:
    """Log weight increment for an observation increment ``dy``.

    With ``use_R`` this is ``-(1/2)(h^T R^{-1} h dt - 2 h^T R^{-1} dy)``;
    otherwise the unscaled ``dy^T h - (1/2) h^T h dt``.
    """
    H = np.atleast_2d(H)
    dy = np.asarray(dy, dtype=float).reshape(-1)
    if use_R:
        Rinv_h = np.linalg.solve(np.atleast_2d(R), H.T).T
    else:
        Rinv_h = H
    return Rinv_h @ dy - 0.5 * np.sum(H * Rinv_h, axis=1) * dt


def reweight(weights, H, dy, dt, R, use_R=True, step=None) -> np.ndarray:
    """Multiply weights by the exponentiated likelihood increment and normalise."""
    logw = np.log(np.asarray(weights, dtype=float)) + log_likelihood_increment(H, dy, dt, R, use_R)
    top = np.max(logw)
    if not np.isfinite(top):
        raise NumericalError("weight collapse: all weights underflowed", step)
    w = np.exp(logw - top)
    return w / w.sum()


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights, u: float) -> np.ndarray:
    """Indices from systematic resampling with a single uniform ``u`` in [0, 1)."""
    M = len(weights)
    positions = (u + np.arange(M)) / M
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


# ---------------------------------------------------------------------------
# steps


def _propagate(states, model, params, dt, noise, step, source=_m.PROCESS):
    dW = noise.normal(source, states.shape[0], model.noise_dim) * np.sqrt(dt)
    return _m.euler_maruyama_step(states, model, params, dt, dW, step=step)


def _gain(fs, model, params, X, H, cfg: FilterConfig, method):
    if method == "constant":
        return constant_gain(X, H, model.obs_cov)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GainConvergenceWarning)
        field_ = compute_gain(
            method, X, H, model.obs_cov, epsilon=cfg.epsilon, max_iters=cfg.max_iters, tol=cfg.gain_tol,
            phi0=fs.diagnostics.get("potential"), metric=cfg.gain_metric,
        )
    if field_.degenerate or not field_.converged:
        if not cfg.gain_fallback:
            if field_.degenerate:
                raise NumericalError("degenerate ensemble in gain computation", fs.step + 1)
            return field_
        fallback = constant_gain(X, H, model.obs_cov)
        fallback.degenerate, fallback.converged = field_.degenerate, field_.converged
        return fallback
    return field_


def fpf_spi_step(fs: FilterState, model: ModelSpec, params, dy, dt, cfg: FilterConfig | None = None,
                 gain_method=None) -> FilterState:
    """Feedback particle filter step with stochastically perturbed innovation (Ito form)::

        dx^i = f dt + g dbeta^i + 2 q dt + K (dy + R^{1/2} deta^i - h(x^i) dt)
    """
    cfg = cfg or FilterConfig()
    method = gain_method or cfg.gain_method
    X = fs.states
    M = X.shape[0]
    H = model.h(X, params)
    gf = _gain(fs, model, params, X, H, cfg, method)
    sdt = np.sqrt(dt)
    dbeta = fs.noise.normal(_m.PROCESS, M, model.noise_dim) * sdt
    deta = fs.noise.normal(_m.INNOVATION, M, model.obs_dim) * sdt
    innov = np.asarray(dy, float).reshape(1, -1) + deta @ model.obs_chol.T - H * dt
    new = (
        X
        + model.f(X, params) * dt
        + model.apply_diffusion(X, dbeta)
        + 2.0 * gf.correction * dt
        + np.einsum("inr,ir->in", gf.gain, innov)
    )
    if not np.all(np.isfinite(new)):
        raise NumericalError("non-finite particles in FPF step", fs.step + 1)
    diag = dict(gain_norm=gf.norm(), gain_converged=gf.converged, gain_degenerate=gf.degenerate,
                gain_iterations=gf.iterations, ess=float(M))
    if gf.potential is not None:
        diag["potential"] = gf.potential
    return fs.advance(new, dt, **diag)


def enkbf_step(fs, model, params, dy, dt, cfg: FilterConfig | None = None) -> FilterState:
    """Ensemble Kalman-Bucy step: the perturbed-innovation FPF with the empirical Kalman gain."""
    return fpf_spi_step(fs, model, params, dy, dt, cfg, gain_method="constant")


def bpf_step(fs, model, params, dy, dt, cfg: FilterConfig | None = None) -> FilterState:
    cfg = cfg or FilterConfig()
    X = fs.states
    M = X.shape[0]
    w = reweight(fs.weights, model.h(X, params), dy, dt, model.obs_cov, cfg.weights_use_R, fs.step + 1)
    ess = effective_sample_size(w)
    resampled = ess < cfg.ess_threshold * M
    if resampled:
        idx = systematic_resample(w, float(fs.noise.uniform(_m.RESAMPLE, 1)[0]))
        X = X[idx]
        w = np.full(M, 1.0 / M)
    new = _propagate(X, model, params, dt, fs.noise, fs.step + 1)
    return fs.advance(new, dt, weights=w, ess=ess, resampled=resampled)


def etpf_step(fs, model, params, dy, dt, cfg: FilterConfig | None = None, plan_callback=None) -> FilterState:
    cfg = cfg or FilterConfig()
    X = fs.states
    M = X.shape[0]
    if M < 2:
        raise ConfigError("ETPF needs at least two particles")
    w = reweight(fs.weights, model.h(X, params), dy, dt, model.obs_cov, cfg.weights_use_R, fs.step + 1)
    plan = exact_transport(squared_distances(X), w)
    if plan_callback is not None:
        plan_callback(fs.step + 1, plan)
    Xa = transform_particles(plan, X)
    shift = float(np.max(np.abs(Xa.mean(axis=0) - w @ X)))
    new = _propagate(Xa, model, params, dt, fs.noise, fs.step + 1)
    return fs.advance(new, dt, ess=effective_sample_size(w), mean_shift=shift)


def kernel_scale(cfg_g, model, fine, coarse, dt) -> float:
    """Resolve the Gibbs-kernel diffusion scale ``g``.

    ``None`` uses the model diffusion; ``'auto'`` picks ``g`` so that the
    median fine-to-coarse squared distance sits at ``2 g^2 dt``.
    """
    if cfg_g is None:
        return model.diffusion_scale(coarse)
    if cfg_g == "auto":
        d2 = np.median(squared_distances(fine, coarse))
        return float(np.sqrt(max(d2, 1e-300) / (2.0 * dt)))
    return float(cfg_g)


def _sinkhorn_plan(fs, model, params, dy, dt, cfg: FilterConfig):
    X = fs.states
    M = X.shape[0]
    k = cfg.k
    L = k * M
    xbar = X + model.f(X, params) * dt
    rep = np.repeat(xbar, k, axis=0)
    fine = _propagate_from(rep, model, dt, fs.noise)
    prior = np.full(L, 1.0 / L)
    w = reweight(prior, model.h(fine, params), dy, dt, model.obs_cov, cfg.weights_use_R, fs.step + 1)
    g = kernel_scale(cfg.g, model, fine, xbar, dt)
    kern = gibbs_kernel(fine, xbar, g, dt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = sinkhorn(kern, np.full(M, 1.0 / M), w, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter)
    if not plan.converged and cfg.strict:
        raise NumericalError("Sinkhorn iteration did not converge", fs.step + 1)
    return fine, w, plan, g


def _propagate_from(rep, model, dt, noise):
    # diffusion-only part of the forecast: x_j = xbar_j + g dbeta_j
    dW = noise.normal(_m.PROCESS, rep.shape[0], model.noise_dim) * np.sqrt(dt)
    return rep + model.apply_diffusion(rep, dW)


def spf_step(fs, model, params, dy, dt, cfg: FilterConfig | None = None, plan_callback=None) -> FilterState:
    cfg = cfg or FilterConfig()
    fine, w, plan, g = _sinkhorn_plan(fs, model, params, dy, dt, cfg)
    if plan_callback is not None:
        plan_callback(fs.step + 1, plan)
    Xa = transform_particles(plan, fine)
    xi = fs.noise.normal(_m.TRANSFORM_NOISE, Xa.shape[0], model.noise_dim) * np.sqrt(dt)
    new = Xa + model.apply_diffusion(Xa, xi)
    if not np.all(np.isfinite(new)):
        raise NumericalError("non-finite particles in SPF step", fs.step + 1)
    return fs.advance(new, dt, ess=effective_sample_size(w), sinkhorn_iterations=plan.iterations,
                      sinkhorn_converged=plan.converged, kernel_g=g)


def rspf_step(fs, model, params, dy, dt, cfg: FilterConfig | None = None, plan_callback=None) -> FilterState:
    cfg = cfg or FilterConfig()
    fine, w, plan, g = _sinkhorn_plan(fs, model, params, dy, dt, cfg)
    if plan_callback is not None:
        plan_callback(fs.step + 1, plan)
    new = plan_resample(plan, fine, lambda size: fs.noise.uniform(_m.RESAMPLE, size))
    return fs.advance(new, dt, ess=effective_sample_size(w), sinkhorn_iterations=plan.iterations,
                      sinkhorn_converged=plan.converged, kernel_g=g)


STEPS = {
    "enkbf": enkbf_step,
    "fpf": fpf_spi_step,
    "bpf": bpf_step,
    "etpf": etpf_step,
    "spf": spf_step,
    "rspf": rspf_step,
}


# ---------------------------------------------------------------------------
# driver


@dataclass
class FilterOutput:
    filter_id: str
    times: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ess: np.ndarray
    step_ms: np.ndarray
    snapshots: dict = field(default_factory=dict)
    final_state: FilterState | None = field(default=None, repr=False)
    # step counts of notable events: gain_not_converged, sinkhorn_not_converged, resampled
    events: dict = field(default_factory=dict)

    @property
    def wall_time(self) -> float:
        return float(self.step_ms.sum() / 1000.0)

    def to_csv(self, fname, include_timing: bool = True):
        import csv

        n = self.means.shape[1]
        header = ["t"] + [f"xhat_{i + 1}" for i in range(n)] + ["ess"] + (["step_ms"] if include_timing else [])
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(v)) for v in self.means[k]] + [repr(float(self.ess[k]))]
                if include_timing:
                    row.append(f"{self.step_ms[k]:.3f}")
                w.writerow(row)


def run_filter(
    filter_id: str,
    model: ModelSpec,
    params,
    x0,
    path: MeasurementIncrementPath,
    config: FilterConfig | dict | None = None,
    seed: int = 0,
    snapshot_every: int | None = None,
    plan_callback=None,
    noise: NoiseBank | None = None,
) -> FilterOutput:
    """Run one filter over ``path``.

    ``x0`` is an initial ensemble ``(M, n)`` or a callable ``x0(seed, M)``
    returning one.  Returns the mean/variance series at ``t_0 .. t_N``.
    """
    if filter_id not in STEPS:
        raise ConfigError(f"unknown filter {filter_id!r}; choose from {FILTERS}")
    cfg = config if isinstance(config, FilterConfig) else FilterConfig.from_dict(config)
    step_fn = STEPS[filter_id]
    X0 = x0(seed, cfg.n_particles) if callable(x0) else np.atleast_2d(np.asarray(x0, dtype=float))
    if X0.shape[1] != model.state_dim:
        raise ConfigError(f"initial ensemble has dimension {X0.shape[1]}, model expects {model.state_dim}")
    if path.obs_dim != model.obs_dim:
        raise ConfigError(f"measurement path has dimension {path.obs_dim}, model expects {model.obs_dim}")
    noise = NoiseBank(seed) if noise is None else noise
    fs = FilterState.initial(X0, noise, path.t0)
    N = len(path)
    means = np.empty((N + 1, model.state_dim))
    variances = np.empty_like(means)
    ess = np.empty(N + 1)
    step_ms = np.zeros(N + 1)
    means[0], variances[0], ess[0] = fs.mean(), fs.variance(), effective_sample_size(fs.weights)
    snapshots = {}
    if snapshot_every:
        snapshots[0] = fs.states.copy()
    extra = {"plan_callback": plan_callback} if filter_id in ("etpf", "spf", "rspf") else {}
    events = {"gain_not_converged": 0, "sinkhorn_not_converged": 0, "resampled": 0}
    for n in range(N):
        tic = time.perf_counter()
        try:
            fs = step_fn(fs, model, params, path.increments[n], path.dt, cfg, **extra)
        except NumericalError as exc:
            if exc.step is None:
                raise NumericalError(str(exc), n + 1) from exc
            raise
        except (MFPFError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"{filter_id} step failed: {exc}", n + 1) from exc
        step_ms[n + 1] = 1000.0 * (time.perf_counter() - tic)
        means[n + 1] = fs.mean()
        variances[n + 1] = fs.variance()
        ess[n + 1] = fs.diagnostics.get("ess", effective_sample_size(fs.weights))
        diag = fs.diagnostics
        events["gain_not_converged"] += diag.get("gain_converged") is False
        events["sinkhorn_not_converged"] += diag.get("sinkhorn_converged") is False
        events["resampled"] += bool(diag.get("resampled", False))
        if snapshot_every and (n + 1) % snapshot_every == 0:
            snapshots[n + 1] = fs.states.copy()
    return FilterOutput(filter_id, path.times, means, variances, ess, step_ms, snapshots, fs, events)
