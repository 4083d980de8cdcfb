"""Command-line entry point: ``endico {run,compare,validate}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

from .agents import SimulationError, SimulationTrace, run_simulation
from .feeder import FeederError, Scenario, load_scenario
from .report import RunReport, build_report
from .validation import run_suites

log = logging.getLogger("endico")

TRACE_HEADER = ["step", "bus", "dispatch_p", "dispatch_q", "v_sq", "line_p", "line_q", "line_i_sq", "flag"]
REPORT_HEADER = ["epoch", "steps_to_converge", "tracking_error_pct", "max_osc_pu", "max_v_violation_pu"]
COMPARE_HEADER = [
    "epoch",
    "ctrl_objective",
    "copf_objective",
    "uncontrolled_objective",
    "tracking_error_pct",
    "max_v_gap_pu",
    "copf_method",
    "copf_feasible",
]
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def fmt(x: float | int | None) -> str:
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.12g}"


def write_trace(trace: SimulationTrace, path: Path) -> None:
    feeder = trace.scenario.feeder
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for rec in trace.records:
            st = rec.state
            for k, bus in enumerate(feeder.order):
                p, q = rec.dispatch.get(bus, (0.0, 0.0))
                flag = "|".join(sorted(rec.flags.get(bus, ())))
                w.writerow(
                    [rec.step, bus, fmt(p), fmt(q), fmt(st.v_sq[k]), fmt(st.p_flow[k]), fmt(st.q_flow[k]), fmt(st.i_sq[k]), flag]
                )


def write_report(report: RunReport, out: Path) -> None:
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for e in report.epochs:
            w.writerow([e.epoch, fmt(e.steps_to_converge), fmt(e.tracking_error_pct), fmt(e.max_osc_pu), fmt(e.max_v_violation_pu)])
    (out / "report.txt").write_text("\n".join(report.summary_lines()) + "\n")


def write_comparison(report: RunReport, out: Path) -> None:
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for e in report.epochs:
            w.writerow(
                [
                    e.epoch,
                    fmt(e.ctrl_objective),
                    fmt(e.copf_objective),
                    fmt(e.uncontrolled_objective),
                    fmt(e.tracking_error_pct),
                    fmt(e.max_v_gap_pu),
                    e.copf_method,
                    int(e.copf_feasible),
                ]
            )
    with (out / "objectives.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "controller", "baseline", "uncontrolled"])
        for k, (c, b, u) in enumerate(zip(report.ctrl_series, report.baseline_series, report.uncontrolled_series)):
            w.writerow([k, fmt(float(c)), fmt(float(b)), fmt(float(u))])


def _scenario(args: argparse.Namespace) -> Scenario:
    path = Path(args.scenario)
    if not path.is_file():
        raise CliError(f"scenario not found: {path}", 2)
    try:
        return load_scenario(path, mode=args.mode, alpha=args.alpha)
    except (FeederError, KeyError, TypeError) as exc:
        raise CliError(f"invalid scenario {path}: {exc}", 2) from None
    except OSError as exc:
        raise CliError(f"cannot read scenario {path}: {exc}", 2) from None


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", 2) from None
    return out


def _simulate(args: argparse.Namespace) -> tuple[SimulationTrace, RunReport, Path]:
    sc = _scenario(args)
    out = _outdir(args.out)
    log.info("running %s: %d steps, mode %s, alpha %g", sc.name, sc.horizon, sc.mode.value, sc.alpha)
    try:
        trace = run_simulation(sc, timing=args.timing)
    except SimulationError as exc:
        write_trace(exc.trace, out / "trace.csv")
        raise CliError(str(exc), 1) from None
    report = build_report(trace, baseline=True, grid_points=args.grid_points)
    write_trace(trace, out / "trace.csv")
    write_report(report, out)
    return trace, report, out


def cmd_run(args: argparse.Namespace) -> int:
    _, report, out = _simulate(args)
    print("\n".join(report.summary_lines()))
    print(f"wrote {out / 'trace.csv'}, {out / 'report.csv'}, {out / 'report.txt'}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    _, report, out = _simulate(args)
    write_comparison(report, out)
    for e in report.epochs:
        if not e.copf_feasible:
            print(f"epoch {e.epoch}: baseline infeasible ({e.copf_method})")
            continue
        print(
            f"epoch {e.epoch}: ctrl={e.ctrl_objective:.6g} copf={e.copf_objective:.6g} "
            f"tracking={e.tracking_error_pct:.4f}% max_v_gap={e.max_v_gap_pu:.3e} pu"
        )
    print("\n".join(report.summary_lines()))
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    failed = False
    for res in run_suites(args.seed, args.count):
        print(res.line())
        for f in res.failures:
            print(f"  failing input: {f}")
        failed |= not res.passed
    return 1 if failed else 0


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="endico", description="Distributed closed-form Volt-Var / Volt-Watt control.")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--mode", choices=["vvc", "vwc"], help="override the scenario's control mode")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--alpha", type=float, help="override the smoothing weight")
        p.add_argument("--timing", action="store_true", help="time closed-form and oracle node solves")
        p.add_argument("--grid-points", type=_positive_int, help="grid points per DER for the baseline")

    p_run = sub.add_parser("run", help="simulate a scenario and write the trace")
    scenario_args(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="simulate and compare against the centralized baseline")
    scenario_args(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate", help="randomized closed-form and power-flow property checks")
    p_val.add_argument("--seed", type=int, default=42)
    p_val.add_argument("--count", type=_positive_int, default=1000)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("ENDICO_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command != "validate" and args.alpha is not None and args.alpha < 0:
        print("error: --alpha must be >= 0", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
