"""Experiment harness: configuration, paired runs of several filters on shared
measurement paths, boxplot summaries and report files."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as _m
from .errors import ConfigError, MFPFError
from .filters import DEFAULT_PARTICLES, FILTERS, FilterConfig, FilterOutput, run_filter
from .joint import ParamDynamics, UniformPrior, augment, augmented_sampler, extract_param_estimates
from .model import get_preset, simulate_truth, write_path_csv

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# reference run-times (seconds) reported for the example experiment; hardware
# dependent, recorded for comparison only
REFERENCE_TIMINGS = {"enkbf": 16.00, "bpf": 2.40, "fpf": 194.60, "etpf": 139.59, "rspf": 569.90}

# filter settings of the example experiment
EXAMPLE_FILTERS = {
    "enkbf": {"n_particles": 1000},
    "bpf": {"n_particles": 1000},
    "fpf": {"n_particles": 1000, "gain": {"method": "kernel", "metric": "whitened", "epsilon": 1.0}},
    "etpf": {"n_particles": 100},
    "rspf": {"n_particles": 1000, "k": 1, "g": "auto"},
}


def example_config() -> dict:
    """The scalar example: joint estimation of ``(a, b)`` with five filters."""
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {"preset": "scalar_lg", "a": -0.2, "b": 0.2, "c": 1.01, "Q": 0.001, "R": 0.0001, "x0_var": 0.001},
        "dt": 0.02,
        "horizon": 50.0,
        "burn_in": 30.0,
        "seeds": [0],
        "filters": copy.deepcopy(EXAMPLE_FILTERS),
        "spf": {"weights_use_R": True},
        "dual": {"enabled": True, "dynamics": "random_walk", "sigma": 1e-3,
                 "prior": {"low": [-0.7, -0.3], "high": [0.3, 0.7]}},
    }


_TOP_KEYS = {"schema_version", "model", "dt", "horizon", "burn_in", "seeds", "filters", "spf", "dual", "output"}


@dataclass
class DualSettings:
    enabled: bool = True
    dynamics: ParamDynamics = field(default_factory=ParamDynamics)
    prior_low: np.ndarray | None = None
    prior_high: np.ndarray | None = None

    @classmethod
    def from_dict(cls, d: dict | None):
        if d is None:
            return cls(enabled=False)
        d = dict(d)
        unknown = set(d) - {"enabled", "dynamics", "sigma", "prior"}
        if unknown:
            raise ConfigError(f"unknown dual keys {sorted(unknown)}")
        prior = d.get("prior") or {}
        if set(prior) - {"low", "high"}:
            raise ConfigError("dual.prior takes 'low' and 'high'")
        if ("low" in prior) != ("high" in prior):
            raise ConfigError("dual.prior needs both 'low' and 'high'")
        sigma = d.get("sigma", 1e-3)
        if not isinstance(sigma, (int, float)):
            raise ConfigError("dual.sigma must be a number")
        dyn = ParamDynamics(d.get("dynamics", "random_walk"), float(sigma))
        low = None if "low" not in prior else np.atleast_1d(np.asarray(prior["low"], float))
        high = None if "high" not in prior else np.atleast_1d(np.asarray(prior["high"], float))
        return cls(bool(d.get("enabled", True)), dyn, low, high)

    def prior(self, truth) -> UniformPrior:
        if self.prior_low is None:
            return UniformPrior.around(truth, 0.5)
        if self.prior_low.size != np.size(truth):
            raise ConfigError(f"dual.prior has {self.prior_low.size} entries, model has {np.size(truth)} parameters")
        return UniformPrior(self.prior_low, self.prior_high)

    def to_dict(self) -> dict:
        d = {"enabled": self.enabled, "dynamics": self.dynamics.kind, "sigma": self.dynamics.sigma}
        if self.prior_low is not None:
            d["prior"] = {"low": self.prior_low.tolist(), "high": self.prior_high.tolist()}
        return d


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {"preset": "scalar_lg"})
    dt: float = 0.02
    horizon: float = 50.0
    burn_in: float = 30.0
    seeds: list = field(default_factory=lambda: [0])
    filters: dict = field(default_factory=lambda: copy.deepcopy(EXAMPLE_FILTERS))
    spf: dict = field(default_factory=lambda: {"weights_use_R": True})
    dual: DualSettings = field(default_factory=DualSettings)
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        model = dict(d.get("model", {"preset": "scalar_lg"}))
        model.setdefault("preset", "scalar_lg")
        filters = d.get("filters", EXAMPLE_FILTERS)
        if isinstance(filters, list):
            filters = {f: {} for f in filters}
        cfg = cls(
            model=model,
            dt=d.get("dt", 0.02),
            horizon=d.get("horizon", 50.0),
            burn_in=d.get("burn_in", 30.0),
            seeds=list(d.get("seeds", [0])),
            filters={k: dict(v or {}) for k, v in dict(filters).items()},
            spf=dict(d.get("spf", {"weights_use_R": True})),
            dual=DualSettings.from_dict(d.get("dual")),
            out_dir=(d.get("output") or {}).get("dir"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, fname) -> "ExperimentConfig":
        try:
            with open(fname) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {fname}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {fname} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "model": dict(self.model),
            "dt": self.dt,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "seeds": list(self.seeds),
            "filters": copy.deepcopy(self.filters),
            "spf": dict(self.spf),
            "dual": self.dual.to_dict() if self.dual.enabled else None,
        }
        if self.out_dir is not None:
            d["output"] = {"dir": self.out_dir}
        return d

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def validate(self):
        for name in ("dt", "horizon", "burn_in"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name} must be a number")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if abs(self.n_steps * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ConfigError(f"horizon {self.horizon} is not a multiple of dt {self.dt}")
        if not 0 <= self.burn_in < self.horizon:
            raise ConfigError("burn_in must lie in [0, horizon)")
        if not self.filters:
            raise ConfigError("at least one filter is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for s in self.seeds:
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError(f"seeds must be nonnegative integers, got {s!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if set(self.spf) - {"weights_use_R"}:
            raise ConfigError("spf takes only 'weights_use_R'")
        for fid in self.filters:
            if fid not in FILTERS:
                raise ConfigError(f"unknown filter {fid!r}; choose from {FILTERS}")
            self.filter_config(fid)
        preset = self.preset()
        if self.dual.enabled:
            if preset.model.param_dim < 1:
                raise ConfigError("dual estimation needs a model with parameters")
            self.dual.prior(preset.params)

    def preset(self) -> _m.Preset:
        overrides = {k: v for k, v in self.model.items() if k != "preset"}
        try:
            return get_preset(self.model["preset"], **overrides)
        except TypeError as exc:
            raise ConfigError(f"bad model settings: {exc}") from exc

    def filter_config(self, filter_id: str) -> FilterConfig:
        d = dict(self.filters.get(filter_id) or {})
        d.setdefault("n_particles", DEFAULT_PARTICLES[filter_id])
        spf = dict(self.spf)
        spf.update(d.pop("spf", None) or {})
        d["spf"] = spf
        return FilterConfig.from_dict(d)

    def with_overrides(self, filters=None, seed=None, out_dir=None) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        if filters is not None:
            new.filters = {f: dict(self.filters.get(f) or {}) for f in filters}
        if seed is not None:
            new.seeds = [seed]
        if out_dir is not None:
            new.out_dir = out_dir
        new.validate()
        return new


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class BoxplotStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple
    count: int

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def to_dict(self) -> dict:
        return {"median": self.median, "q1": self.q1, "q3": self.q3, "whisker_low": self.whisker_low,
                "whisker_high": self.whisker_high, "n_outliers": len(self.outliers),
                "outliers": list(self.outliers), "count": self.count}


def boxplot_stats(series, burn_in_time=None, times=None) -> BoxplotStats:
    """Tukey boxplot summary of ``series``.

    Quartiles use linear interpolation between order statistics (type 7);
    whiskers reach the most extreme samples within ``1.5 IQR`` of the box.
    With ``burn_in_time`` only samples at ``times > burn_in_time`` are used.
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    if burn_in_time is not None:
        if times is None:
            raise ValueError("times are needed to apply a burn-in")
        times = np.asarray(times, dtype=float).reshape(-1)
        if times.shape != x.shape:
            raise ValueError("times and series differ in length")
        x = x[times > burn_in_time]
    x = x[np.isfinite(x)]
    if x.size < 5:
        raise ValueError(f"boxplot needs at least 5 samples, got {x.size}")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = x[(x >= lo) & (x <= hi)]
    out = np.sort(x[(x < lo) | (x > hi)])
    return BoxplotStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                        tuple(float(v) for v in out), int(x.size))


def rmse(a, b) -> float:
    d = np.asarray(a, float) - np.asarray(b, float)
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# running


@dataclass
class RunRecord:
    filter_id: str
    seed: int
    status: str
    error: str | None = None
    output: FilterOutput | None = field(default=None, repr=False)
    param_series: np.ndarray | None = field(default=None, repr=False)
    param_boxplots: list = field(default_factory=list)
    param_medians: list = field(default_factory=list)
    param_errors: list = field(default_factory=list)
    state_rmse: float | None = None
    wall_time: float | None = None
    events: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "filter": self.filter_id,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "wall_time_s": self.wall_time,
            "state_rmse": self.state_rmse,
            "param_medians": self.param_medians,
            "param_abs_errors": self.param_errors,
            "param_boxplots": [b.to_dict() for b in self.param_boxplots],
            "events": self.events,
        }


@dataclass
class RunReport:
    config: ExperimentConfig
    param_names: list
    truth_params: np.ndarray
    runs: list
    truths: dict = field(default_factory=dict, repr=False)
    seed_manifest: dict = field(default_factory=dict)

    def record(self, filter_id, seed) -> RunRecord:
        for r in self.runs:
            if r.filter_id == filter_id and r.seed == seed:
                return r
        raise KeyError((filter_id, seed))

    def wall_clock(self) -> dict:
        out = {}
        for fid in self.config.filters:
            times = [r.wall_time for r in self.runs if r.filter_id == fid and r.status == "ok"]
            out[fid] = float(np.mean(times)) if times else None
        return out

    def cross_seed_boxplots(self) -> dict:
        """Boxplot over seeds of the per-run parameter medians (needs 5+ seeds)."""
        out = {}
        for fid in self.config.filters:
            meds = np.array([r.param_medians for r in self.runs if r.filter_id == fid and r.status == "ok"])
            if meds.ndim != 2 or meds.shape[0] < 5:
                continue
            out[fid] = [boxplot_stats(meds[:, j]).to_dict() for j in range(meds.shape[1])]
        return out

    def dispersion_check(self) -> dict:
        """Soft check that the Kalman-type filters (EnKBF, FPF) spread their
        parameter estimates at least as widely as the transport and resampling
        filters; a violation is logged, never raised."""
        if not self.param_names:
            return {"checked": False, "reason": "no parameters estimated"}
        iqr = {}
        for r in self.runs:
            if r.status == "ok" and r.param_boxplots:
                iqr.setdefault(r.filter_id, []).append(np.mean([b.iqr for b in r.param_boxplots]))
        kalman = [v for f in ("enkbf", "fpf") for v in iqr.get(f, [])]
        others = [v for f in ("bpf", "etpf", "spf", "rspf") for v in iqr.get(f, [])]
        if not kalman or not others:
            return {"checked": False, "reason": "needs one Kalman-type and one other filter"}
        ok = bool(np.mean(kalman) >= np.mean(others))
        if not ok:
            log.warning("dispersion ranking differs from the reference: EnKBF/FPF mean IQR %.3g < others %.3g",
                        np.mean(kalman), np.mean(others))
        return {"checked": True, "ok": ok, "mean_iqr": {f: float(np.mean(v)) for f, v in iqr.items()}}

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "param_names": self.param_names,
            "truth_params": self.truth_params.tolist(),
            "seed_manifest": self.seed_manifest,
            "runs": [r.to_dict() for r in self.runs],
            "wall_clock_s": self.wall_clock(),
            "reference_wall_clock_s": REFERENCE_TIMINGS,
            "cross_seed_boxplots": self.cross_seed_boxplots(),
            "dispersion_check": self.dispersion_check(),
        }

    def write(self, out_dir, include_timing: bool = True):
        """Write ``truth_seed<S>.csv``, ``<filter>_seed<S>.csv``, snapshot files and ``summary.json``."""
        os.makedirs(out_dir, exist_ok=True)
        for seed, (states, path) in self.truths.items():
            write_path_csv(os.path.join(out_dir, f"truth_seed{seed}.csv"), states, path)
        for r in self.runs:
            if r.output is None:
                continue
            r.output.to_csv(os.path.join(out_dir, f"{r.filter_id}_seed{r.seed}.csv"), include_timing)
            if r.output.snapshots:
                _write_snapshots(os.path.join(out_dir, f"{r.filter_id}_seed{r.seed}_snapshots.csv"), r.output)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(_jsonable(self.summary()), fh, indent=2, sort_keys=True)


def _write_snapshots(fname, output: FilterOutput):
    n = output.means.shape[1]
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "particle"] + [f"x_{i + 1}" for i in range(n)])
        for step in sorted(output.snapshots):
            t = output.times[step]
            for i, x in enumerate(output.snapshots[step]):
                w.writerow([repr(float(t)), i] + [repr(float(v)) for v in x])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _param_names(preset, d) -> list:
    names = preset.param_names
    return list(names) if len(names) == d else [f"theta_{j + 1}" for j in range(d)]


def run_experiment(config: ExperimentConfig | dict, snapshot_every=None, plan_dir=None, progress=None) -> RunReport:
    """Run every configured filter on one shared truth/measurement path per seed.

    Filter failures are recorded per ``(filter, seed)`` and the sweep goes on.
    ``plan_dir`` dumps transport plans (at ``snapshot_every`` steps, or every
    step) as ``row, col, value`` CSV files.  ``progress`` is called with each
    finished :class:`RunRecord`.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    preset = cfg.preset()
    base = preset.model
    n = base.state_dim
    truth_params = np.asarray(preset.params, dtype=float).reshape(-1)
    if cfg.dual.enabled:
        d = base.param_dim
        prior = cfg.dual.prior(truth_params)
        run_model = augment(base, cfg.dual.dynamics)
        run_params = None
        sampler = augmented_sampler(preset.x0_mean, preset.x0_cov, prior)
        names = _param_names(preset, d)
    else:
        d = 0
        run_model, run_params = base, preset.params
        sampler = lambda seed, count: preset.sample_x0(seed, count, source=_m.FILTER_INIT)  # noqa: E731
        names = []

    report = RunReport(cfg, names, truth_params if d else np.zeros(0), [])
    for seed in cfg.seeds:
        x0 = preset.sample_x0(seed)[0]
        states, path = simulate_truth(base, preset.params, x0, cfg.n_steps, cfg.dt, seed)
        report.truths[seed] = (states, path)
        report.seed_manifest[str(seed)] = {"truth_seed": seed, "filter_seed": seed,
                                           "x0": x0.tolist(), "n_steps": cfg.n_steps}
        for fid in cfg.filters:
            fcfg = cfg.filter_config(fid)
            callback = None
            if plan_dir is not None and fid in ("etpf", "spf", "rspf"):
                callback = _plan_dumper(plan_dir, fid, seed, snapshot_every)
            try:
                out = run_filter(fid, run_model, run_params, sampler, path, fcfg, seed=seed,
                                 snapshot_every=snapshot_every, plan_callback=callback)
            except MFPFError as exc:
                log.warning("%s failed on seed %d: %s", fid, seed, exc)
                rec = RunRecord(fid, seed, "failed", error=str(exc))
            else:
                rec = _summarise(fid, seed, out, states, d, cfg.burn_in, truth_params)
            report.runs.append(rec)
            if progress is not None:
                progress(rec)
    if cfg.out_dir is not None:
        report.write(cfg.out_dir)
    return report


def _summarise(fid, seed, out: FilterOutput, states, d, burn_in, truth_params) -> RunRecord:
    sel = out.times > burn_in
    n = states.shape[1]
    rec = RunRecord(fid, seed, "ok", output=out, wall_time=out.wall_time, events=dict(out.events))
    rec.state_rmse = rmse(out.means[sel, :n], states[sel])
    if d:
        series = extract_param_estimates(out, d)
        rec.param_series = series
        rec.param_boxplots = [boxplot_stats(series[:, j], burn_in, out.times) for j in range(d)]
        rec.param_medians = [b.median for b in rec.param_boxplots]
        rec.param_errors = [abs(m - t) for m, t in zip(rec.param_medians, truth_params)]
    return rec


def _plan_dumper(plan_dir, fid, seed, every):
    os.makedirs(plan_dir, exist_ok=True)

    def dump(step, plan):
        if every and step % every:
            return
        plan.to_csv(os.path.join(plan_dir, f"{fid}_seed{seed}_step{step}.csv"))

    return dump
