"""Parameterised SDE state-space models, noise streams and truth simulation.

Models are written for ensembles: ``drift(X, theta)`` and ``sensor(X, theta)``
take an ``(M, n)`` array and either a shared ``(d,)`` parameter vector or
per-particle ``(M, d)`` parameters, and return ``(M, n)`` / ``(M, r)`` arrays
per unit time.  ``diffusion(X)`` returns a constant ``(n, m)`` matrix or a
per-particle ``(M, n, m)`` stack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError

# noise-source codes; each (source, particle) pair owns an independent stream
TRUTH_X0 = 1
TRUTH_PROCESS = 2
TRUTH_OBS = 3
FILTER_INIT = 10
PROCESS = 11
INNOVATION = 12
TRANSFORM_NOISE = 13
RESAMPLE = 14
PARAM_PRIOR = 15


@dataclass(frozen=True)
class ModelSpec:
    """The (f, g, h, R) bundle of a parameterised signal/measurement model."""

    state_dim: int
    obs_dim: int
    noise_dim: int
    param_dim: int
    drift: Callable
    diffusion: Callable
    sensor: Callable
    obs_cov: np.ndarray
    name: str = "model"

    def __post_init__(self):
        for attr in ("state_dim", "obs_dim", "noise_dim"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{attr} must be >= 1")
        if self.param_dim < 0:
            raise ConfigError("param_dim must be >= 0")
        R = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))
        if R.shape != (self.obs_dim, self.obs_dim):
            raise ConfigError(f"obs_cov has shape {R.shape}, expected {(self.obs_dim,) * 2}")
        if not np.allclose(R, R.T):
            raise ConfigError("obs_cov must be symmetric")
        try:
            chol = np.linalg.cholesky(R)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("obs_cov must be positive definite") from exc
        object.__setattr__(self, "obs_cov", R)
        object.__setattr__(self, "_obs_chol", chol)

    @property
    def obs_chol(self) -> np.ndarray:
        return self._obs_chol

    def f(self, X, theta) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.asarray(self.drift(X, theta), dtype=float)
        return out.reshape(X.shape[0], self.state_dim)

    def h(self, X, theta) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.asarray(self.sensor(X, theta), dtype=float)
        return out.reshape(X.shape[0], self.obs_dim)

    def g(self, X) -> np.ndarray:
        """Diffusion as an ``(M, n, m)`` stack."""
        X = np.atleast_2d(X)
        G = np.asarray(self.diffusion(X), dtype=float)
        if G.ndim == 2:
            G = np.broadcast_to(G, (X.shape[0],) + G.shape)
        if G.shape != (X.shape[0], self.state_dim, self.noise_dim):
            raise ConfigError(f"diffusion returned shape {G.shape}")
        return G

    def apply_diffusion(self, X, dW) -> np.ndarray:
        """``g(x^i) dW^i`` for every particle."""
        G = self.g(X)
        return np.einsum("inm,im->in", G, np.atleast_2d(dW))

    def diffusion_scale(self, X) -> float:
        """Largest per-component diffusion standard deviation, averaged over particles."""
        G = self.g(X)
        var = np.einsum("inm,inm->in", G, G)
        return float(np.sqrt(var.max(axis=1)).mean())


@dataclass(frozen=True)
class MeasurementIncrementPath:
    """Observed increments ``dy`` on a uniform grid starting at ``t0``.

    ``increments[n]`` is the increment over ``[t0 + n dt, t0 + (n+1) dt]``.
    """

    t0: float
    dt: float
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        object.__setattr__(self, "increments", inc)

    def __len__(self):
        return self.increments.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.increments.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self) + 1)


@dataclass(frozen=True)
class RngStream:
    """One reproducible sub-stream of random numbers.

    Identical ``(seed, stream_id)`` pairs give identical draws; distinct
    ``stream_id`` values are independent (numpy ``SeedSequence`` spawn keys).
    """

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))


def particle_stream(seed: int, source: int, particle: int) -> RngStream:
    return RngStream(seed, (source << 32) | particle)


class _ParticleNormals:
    """Per-particle standard normal streams, drawn in chunks."""

    def __init__(self, seed, source, dim, chunk):
        self.seed, self.source, self.dim, self.chunk = seed, source, dim, chunk
        self.gens = []
        self.buffer = np.empty((0, chunk, dim))
        self.pos = np.zeros(0, dtype=int)

    def _grow(self, count):
        old = len(self.gens)
        self.gens.extend(
            particle_stream(self.seed, self.source, i).generator() for i in range(old, count)
        )
        buf = np.empty((count, self.chunk, self.dim))
        buf[:old] = self.buffer
        for i in range(old, count):
            buf[i] = self.gens[i].standard_normal((self.chunk, self.dim))
        self.buffer = buf
        start = int(self.pos[0]) if old else 0
        self.pos = np.concatenate([self.pos, np.full(count - old, start, dtype=int)])

    def draw(self, count):
        if count > len(self.gens):
            self._grow(count)
        pos = self.pos[:count]
        # particles are always drawn together, so positions stay aligned
        p = int(pos[0])
        if p == self.chunk:
            for i in range(count):
                self.buffer[i] = self.gens[i].standard_normal((self.chunk, self.dim))
            self.pos[:count] = 0
            p = 0
        out = self.buffer[:count, p, :].copy()
        self.pos[:count] += 1
        return out


class NoiseBank:
    """Noise for one simulation or filter run.

    ``normal(source, count, dim)`` returns the next standard normal vector of
    each of ``count`` per-particle streams, so changing the particle count
    never reshuffles the noise seen by existing particles.
    """

    def __init__(self, seed: int, chunk: int = 128):
        self.seed = int(seed)
        self.chunk = chunk
        self._normals = {}
        self._shared = {}

    def normal(self, source: int, count: int, dim: int) -> np.ndarray:
        key = (source, dim)
        if key not in self._normals:
            self._normals[key] = _ParticleNormals(self.seed, source, dim, self.chunk)
        return self._normals[key].draw(count)

    def uniform(self, source: int, size) -> np.ndarray:
        if source not in self._shared:
            self._shared[source] = RngStream(self.seed, source).generator()
        return self._shared[source].random(size)


class ZeroNoise(NoiseBank):
    """All Gaussian draws are zero; uniforms are 0.5.  For deterministic tests."""

    def __init__(self):
        super().__init__(0)

    def normal(self, source, count, dim):
        return np.zeros((count, dim))

    def uniform(self, source, size):
        return np.full(size, 0.5)


def euler_maruyama_step(x, model: ModelSpec, params, dt: float, dW, step=None) -> np.ndarray:
    """One Euler-Maruyama step ``x + f(x, params) dt + g(x) dW``.

    ``x`` may be a single state ``(n,)`` or an ensemble ``(M, n)``; ``dW`` has
    matching leading shape and variance ``dt`` per component.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    dW = np.asarray(dW, dtype=float).reshape(X.shape[0], model.noise_dim)
    out = X + model.f(X, params) * dt + model.apply_diffusion(X, dW)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite state in Euler-Maruyama step", step)
    return out[0] if single else out


def simulate_truth(model: ModelSpec, params, x0, n_steps: int, dt: float, rng=0, t0: float = 0.0):
    """Simulate a truth trajectory and its measurement increments.

    Returns ``(states, path)`` with ``states`` of shape ``(n_steps + 1, n)`` and
    ``path.increments[k] = h(x_k) dt + R^{1/2} xi_k sqrt(dt)``.  ``rng`` is an
    integer seed or a :class:`NoiseBank`.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if dt <= 0:
        raise ConfigError("dt must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != model.state_dim:
        raise ConfigError(f"x0 has dimension {x0.shape[0]}, model expects {model.state_dim}")
    noise = rng if isinstance(rng, NoiseBank) else NoiseBank(int(rng))
    sdt = np.sqrt(dt)
    states = np.empty((n_steps + 1, model.state_dim))
    increments = np.empty((n_steps, model.obs_dim))
    states[0] = x0
    x = x0[None, :]
    for k in range(n_steps):
        xi = noise.normal(TRUTH_OBS, 1, model.obs_dim)
        increments[k] = model.h(x, params)[0] * dt + model.obs_chol @ xi[0] * sdt
        dW = noise.normal(TRUTH_PROCESS, 1, model.noise_dim) * sdt
        x = euler_maruyama_step(x, model, params, dt, dW, step=k + 1)
        states[k + 1] = x[0]
    return states, MeasurementIncrementPath(t0, dt, increments)


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class Preset:
    model: ModelSpec
    params: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    constants: dict = field(default_factory=dict)
    param_names: tuple = ()

    def sample_x0(self, seed: int, count: int = 1, source: int = TRUTH_X0) -> np.ndarray:
        noise = NoiseBank(seed)
        L = np.linalg.cholesky(self.x0_cov)
        z = noise.normal(source, count, self.model.state_dim)
        return self.x0_mean + z @ L.T


def scalar_linear_gaussian(a=-0.2, b=0.2, c=1.01, Q=0.001, R=0.0001, x0_var=0.001) -> Preset:
    """``dx = (a x + b) dt + sqrt(Q) dv``, ``dy = c x dt + sqrt(R) dw`` with ``theta = (a, b)``."""
    sq = np.sqrt(Q)

    def drift(X, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return theta[0] * X + theta[1]
        return theta[:, 0:1] * X + theta[:, 1:2]

    def diffusion(X):
        return np.array([[sq]])

    def sensor(X, theta):
        return c * X

    model = ModelSpec(1, 1, 1, 2, drift, diffusion, sensor, np.array([[R]]), name="scalar_lg")
    return Preset(
        model,
        np.array([a, b]),
        np.zeros(1),
        np.array([[x0_var]]),
        dict(a=a, b=b, c=c, Q=Q, R=R, x0_var=x0_var),
        ("a", "b"),
    )


PRESETS = {"scalar_lg": scalar_linear_gaussian}


def get_preset(name: str, **overrides) -> Preset:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None
    return factory(**overrides)


# ---------------------------------------------------------------------------
# CSV


def write_path_csv(fname, states, path: MeasurementIncrementPath):
    """Columns ``t, x_1..x_n, dy_1..dy_r``; row k pairs ``x_k`` with the increment
    over ``[t_k, t_{k+1}]`` (``nan`` on the final row)."""
    states = np.atleast_2d(states)
    n, r = states.shape[1], path.obs_dim
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"dy_{j + 1}" for j in range(r)]
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(path.times):
            dy = path.increments[k] if k < len(path) else np.full(r, np.nan)
            w.writerow([repr(float(t))] + [repr(float(v)) for v in states[k]] + [repr(float(v)) for v in dy])


def read_path_csv(fname):
    """Inverse of :func:`write_path_csv`; returns ``(states, path)``."""
    with open(fname, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    ycols = [i for i, h in enumerate(header) if h.startswith("dy_")]
    if not xcols or not ycols or len(body) < 2:
        raise ConfigError(f"{fname}: not a truth/measurement CSV")
    t = body[:, 0]
    path = MeasurementIncrementPath(t[0], t[1] - t[0], body[:-1, ycols])
    return body[:, xcols], path
