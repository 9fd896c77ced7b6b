"""Command-line entry point.

Exit codes: 0 success, 1 configuration error (including bad flags), 2
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from ._validation import check_positive, check_seed, parse_filter_list
from .errors import ConfigError, NumericalError
from .experiment import ExperimentConfig, example_config, run_experiment
from .filters import FILTERS
from .model import PRESETS, simulate_truth, write_path_csv
from .oracle import kalman_bucy_oracle

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p, out=True):
    p.add_argument("--config", metavar="PATH", help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model preset (used when no config is given)")
    p.add_argument("--seed", type=int, metavar="N", help="seed (overrides the config's seed list)")
    if out:
        p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")


def _filter_flags(p):
    p.add_argument("--filters", metavar="LIST", help=f"comma-separated subset of {','.join(FILTERS)}")
    p.add_argument("--dump-plans", action="store_true", help="write transport plans as row,col,value CSV")
    p.add_argument("--snapshots", type=int, metavar="EVERY", help="write ensemble snapshots every EVERY steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfpf", description="Mean-field particle filters and the scalar estimation experiment.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a truth trajectory and its measurement increments")
    _common(p)

    p = sub.add_parser("filter", help="run filters on one simulated path")
    _common(p)
    _filter_flags(p)

    p = sub.add_parser("experiment", help="run the configured experiment and write a report")
    _common(p)
    _filter_flags(p)

    p = sub.add_parser("oracle", help="Kalman-Bucy reference filter on a simulated path")
    _common(p)

    p = sub.add_parser("validate-config", help="check a config file")
    p.add_argument("path", nargs="?", metavar="PATH")
    p.add_argument("--config", metavar="PATH")
    return parser


def _load_config(args, dual_default: bool) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        d = example_config()
        d["model"] = {"preset": args.preset or "scalar_lg"}
        if not dual_default:
            d["dual"] = None
            d["filters"] = {f: {} for f in FILTERS if f != "spf"}
        cfg = ExperimentConfig.from_dict(d)
    filters = None if getattr(args, "filters", None) is None else parse_filter_list(args.filters, FILTERS)
    seed = None if args.seed is None else check_seed(args.seed)
    return cfg.with_overrides(filters=filters, seed=seed)


def _run(args, cfg: ExperimentConfig, write_summary: bool) -> int:
    out = args.out
    snapshots = args.snapshots
    if snapshots is not None:
        check_positive(snapshots, "--snapshots", integer=True)
    plan_dir = os.path.join(out, "plans") if args.dump_plans else None

    def progress(rec):
        if rec.status == "ok":
            meds = ", ".join(f"{m:.4f}" for m in rec.param_medians)
            extra = f" param medians [{meds}]" if meds else ""
            print(f"{rec.filter_id:6s} seed {rec.seed}: ok in {rec.wall_time:.1f}s, state rmse {rec.state_rmse:.4g}{extra}")
        else:
            print(f"{rec.filter_id:6s} seed {rec.seed}: FAILED ({rec.error})")

    report = run_experiment(cfg, snapshot_every=snapshots, plan_dir=plan_dir, progress=progress)
    os.makedirs(out, exist_ok=True)
    if write_summary:
        report.write(out)
    else:
        for seed, (states, path) in report.truths.items():
            write_path_csv(os.path.join(out, f"truth_seed{seed}.csv"), states, path)
        for r in report.runs:
            if r.output is not None:
                r.output.to_csv(os.path.join(out, f"{r.filter_id}_seed{r.seed}.csv"))
    print(f"wrote {out}")
    return EXIT_NUMERICAL if any(r.status != "ok" for r in report.runs) else EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args, dual_default=False)
    preset = cfg.preset()
    os.makedirs(args.out, exist_ok=True)
    for seed in cfg.seeds:
        x0 = preset.sample_x0(seed)[0]
        states, path = simulate_truth(preset.model, preset.params, x0, cfg.n_steps, cfg.dt, seed)
        fname = os.path.join(args.out, f"truth_seed{seed}.csv")
        write_path_csv(fname, states, path)
        print(f"wrote {fname}")
    return EXIT_OK


def cmd_filter(args) -> int:
    return _run(args, _load_config(args, dual_default=False), write_summary=False)


def cmd_experiment(args) -> int:
    return _run(args, _load_config(args, dual_default=True), write_summary=True)


def cmd_oracle(args) -> int:
    cfg = _load_config(args, dual_default=False)
    preset = cfg.preset()
    c = preset.constants
    if not {"a", "b", "c", "Q", "R"} <= set(c):
        raise ConfigError(f"preset {cfg.model['preset']!r} has no Kalman-Bucy oracle")
    os.makedirs(args.out, exist_ok=True)
    for seed in cfg.seeds:
        x0 = preset.sample_x0(seed)[0]
        states, path = simulate_truth(preset.model, preset.params, x0, cfg.n_steps, cfg.dt, seed)
        m, P = kalman_bucy_oracle(c["a"], c["b"], c["c"], c["Q"], c["R"], float(preset.x0_mean[0]),
                                  float(preset.x0_cov[0, 0]), path)
        fname = os.path.join(args.out, f"oracle_seed{seed}.csv")
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "mean", "variance"])
            for t, x, mi, Pi in zip(path.times, states[:, 0], m, P):
                w.writerow([repr(float(t)), repr(float(x)), repr(float(mi)), repr(float(Pi))])
        write_path_csv(os.path.join(args.out, f"truth_seed{seed}.csv"), states, path)
        print(f"wrote {fname}")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = args.path or args.config
    if not path:
        raise ConfigError("validate-config needs a config path")
    cfg = ExperimentConfig.from_json(path)
    print(f"{path}: ok (filters {', '.join(cfg.filters)}; seeds {cfg.seeds}; {cfg.n_steps} steps)")
    print(json.dumps(cfg.to_dict(), sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "experiment": cmd_experiment,
    "oracle": cmd_oracle,
    "validate-config": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
