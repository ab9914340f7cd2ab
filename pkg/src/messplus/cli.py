"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ExperimentConfig, Policy
from .metrics import comparison_table, read_report, write_steps_csv
from .zoo import PRESETS, ConfigError, synth_trace, write_trace

log = logging.getLogger("messplus")

DEFAULT_V_GRID = [0.01, 0.1, 1.0, 10.0, 100.0]
DEFAULT_C_GRID = [1.0, 3.0, 5.0, 10.0]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seeds(text: str) -> list[int]:
    """``7``, ``0,1,2`` or a range ``0-9``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _add_common(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="YAML experiment config")
    p.add_argument("--trace", default=default, help="trace file (JSON lines)")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--seed", type=int, default=default, help="seed for every random stream")
    p.add_argument("--seeds", type=_seeds, default=default, help="seed list, e.g. 0-9 or 1,4,7")
    p.add_argument("--alpha", type=float, default=default, help="SLA accuracy floor")
    p.add_argument("--margin", type=float, default=default, help="safety margin added to alpha")
    p.add_argument("--v", type=float, default=default, help="energy weight V")
    p.add_argument("--c", type=float, default=default, help="exploration scale c")
    p.add_argument("--eta", type=float, default=default, help="predictor learning rate")
    p.add_argument("--policy", default=default,
                   help="mess_plus | smallest_only | largest_only | random_constrained[:q] | fixed:i")
    p.add_argument("--preset", choices=sorted(PRESETS), default=default,
                   help="synthetic trace preset when no --trace is given")
    p.add_argument("--num-requests", type=int, default=default,
                   help="synthetic trace length")
    p.add_argument("--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="messplus", description="Energy-aware model selection under an accuracy SLA.")
    _add_common(parser, None)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_common(p, argparse.SUPPRESS)
        return p

    add("run", "run one policy over one trace")
    p = add("sweep-v", "sweep the energy weight V")
    p.add_argument("--grid", type=_floats, default=None)
    p.add_argument("--save-steps", action="store_true")
    p = add("sweep-c", "sweep the exploration scale c")
    p.add_argument("--grid", type=_floats, default=None)
    p.add_argument("--holdout", type=int, default=None, help="records held out for predictor loss")
    p.add_argument("--save-steps", action="store_true")
    p = add("synth-trace", "write a synthetic trace file")
    p.add_argument("--output", default=None, help="trace file path (default: <out>/trace-<preset>-seed<seed>.jsonl)")
    p = add("report", "print stored run reports and a comparison table")
    p.add_argument("paths", nargs="+", help="report JSON files or run directories")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    ctl_updates = {}
    if args.v is not None:
        ctl_updates["V"] = args.v
    if args.c is not None:
        ctl_updates["c"] = args.c
    if args.eta is not None:
        ctl_updates["eta"] = args.eta
    if ctl_updates:
        cfg.controller = dataclasses.replace(cfg.controller, **ctl_updates)
    if args.policy is not None:
        cfg.policy = Policy.parse(args.policy)
    if args.alpha is not None:
        cfg.alpha_sla = args.alpha
    if args.margin is not None:
        cfg.alpha_margin = args.margin
    if args.out is not None:
        cfg.out_dir = args.out
    if args.trace is not None:
        cfg.trace.path = args.trace
    if args.preset is not None:
        cfg.trace.preset = args.preset
    if args.num_requests is not None:
        cfg.trace.num_requests = args.num_requests
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.seed is not None:
        cfg.seeds = [args.seed]
        cfg.trace.seed = args.seed
    if not cfg.seeds:
        raise UsageError("at least one seed is required")
    return cfg


def _cmd_run(cfg: ExperimentConfig, args) -> int:
    trace, means = cfg.trace.load()
    run_dir = harness.new_run_dir(cfg.out_dir, f"run-{cfg.policy.kind}")
    harness.save_config(cfg, run_dir)
    reports = []
    for seed in cfg.seeds:
        result = harness.run_policy(cfg, trace, seed, calibration_means=means)
        harness.save_run(result, run_dir, cfg, seed)
        reports.append(result.report)
    print(comparison_table({str(cfg.policy): reports}, cfg.alpha_sla))
    print(f"wrote {run_dir}")
    return 0


def _cmd_sweep(cfg: ExperimentConfig, args, param: str) -> int:
    trace, means = cfg.trace.load()
    if param == "V":
        grid = args.grid or cfg.v_grid or DEFAULT_V_GRID
        points = harness.sweep_v(cfg, grid, trace, calibration_means=means)
    else:
        grid = args.grid or cfg.c_grid or DEFAULT_C_GRID
        if args.holdout is not None:
            cfg.holdout_size = args.holdout
        points = harness.sweep_c(cfg, grid, trace, calibration_means=means)
    run_dir = harness.new_run_dir(cfg.out_dir, f"sweep-{param.lower()}")
    harness.save_config(cfg, run_dir)
    harness.write_sweep_csv(points, run_dir / f"sweep_{param.lower()}.csv", param)
    if param == "c":
        harness.write_loss_curves_csv(points, cfg.seeds, run_dir / "loss_curves.csv")
    if args.save_steps:
        for pt in points:
            for seed, run in zip(cfg.seeds, pt.runs):
                write_steps_csv(run.steps, run_dir / f"steps-{param}{pt.value!r}-seed{seed}.csv")

    print(f"{param:>8}  accuracy          energy (J)          latency (s)  K        SLA met")
    for pt in points:
        s = pt.summary()
        print(f"{pt.value:>8g}  {s['accuracy_mean']:.4f} ± {s['accuracy_std']:.4f}  "
              f"{s['energy_mean']:9.3f} ± {s['energy_std']:7.3f}  "
              f"{s['latency_mean']:8.3f}     {s['explorations_mean']:7.1f}  "
              f"{s['sla_met_fraction']:.0%}")
    print(f"wrote {run_dir}")
    return 0


def _cmd_synth(cfg: ExperimentConfig, args) -> int:
    seed = cfg.trace.seed
    path = Path(args.output) if args.output else (
        Path(cfg.out_dir) / f"trace-{cfg.trace.preset}-seed{seed}.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    records = synth_trace(cfg.trace.synth_config(), seed)
    write_trace(records, path)
    print(f"wrote {len(records)} records to {path}")
    return 0


def _cmd_report(args) -> int:
    files = []
    for raw in args.paths:
        p = Path(raw)
        files.extend(sorted(p.glob("report-*.json")) if p.is_dir() else [p])
    if not files:
        raise FileNotFoundError("no report files found")
    grouped: dict[str, list] = {}
    for f in files:
        r = read_report(f)
        grouped.setdefault(r.policy_name, []).append(r)
        print(f"{f}: policy={r.policy_name} T={r.T} accuracy={r.mean_accuracy:.4f} "
              f"({100 * r.mean_accuracy:.1f}%) energy={r.mean_energy_joules:.3f} J "
              f"K={r.exploration_count} Q(T)/T={r.time_averaged_queue:.5f} "
              f"SLA(alpha={r.sla_alpha}) {'met' if r.sla_met else 'violated'}")
    print()
    print(comparison_table(grouped))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("messplus: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "report":
            return _cmd_report(args)
        cfg = load_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"messplus: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:
        print(f"messplus: error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            return _cmd_run(cfg, args)
        if args.command == "sweep-v":
            return _cmd_sweep(cfg, args, "V")
        if args.command == "sweep-c":
            return _cmd_sweep(cfg, args, "c")
        return _cmd_synth(cfg, args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"messplus: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
