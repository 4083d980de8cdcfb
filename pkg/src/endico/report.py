"""Per-epoch performance summary of a simulation trace against the baseline.

An epoch is one profile interval: the inputs are constant inside it, so
convergence, oscillation and tracking are all measured per epoch.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .agents import SimulationTrace, default_dispatch, objective_value, run_uncontrolled, summarize_flags
from .baseline import CentralizedResult, copf, objective_for
from .feeder import DerMode

CONVERGENCE_TOL = 1e-4
TRACKING_EPS = 1e-9


def steps_to_converge(setpoints: np.ndarray, tol: float = CONVERGENCE_TOL) -> int | None:
    """Steps until the dispatch stops moving by ``tol`` or more.

    ``setpoints`` has shape (steps, n_der) for one epoch. Returns 1 when the
    first step is already final and None when the last recorded change is
    still at least ``tol``.
    """
    if len(setpoints) < 2:
        return 1
    change = np.abs(np.diff(setpoints, axis=0)).max(axis=1, initial=0.0)
    if change[-1] >= tol:
        return None
    moving = np.flatnonzero(change >= tol)
    return 1 if moving.size == 0 else int(moving[-1]) + 2


def oscillation_pu(v_sq: np.ndarray) -> float:
    """Largest per-bus voltage-magnitude swing over the epoch after its first step."""
    if len(v_sq) < 2:
        return 0.0
    v = np.sqrt(v_sq[1:])
    return float((v.max(axis=0) - v.min(axis=0)).max())


def tracking_error_pct(ctrl: float, ref: float) -> float:
    return 100.0 * abs(ctrl - ref) / max(abs(ref), TRACKING_EPS)


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    first_step: int
    last_step: int
    steps_to_converge: int | None
    max_osc_pu: float
    max_v_violation_pu: float
    ctrl_objective: float
    uncontrolled_objective: float
    copf_objective: float = math.nan
    copf_method: str = ""
    copf_feasible: bool = False
    tracking_error_pct: float = math.nan
    max_v_gap_pu: float = math.nan


@dataclass
class RunReport:
    name: str
    mode: DerMode
    epochs: list[EpochReport]
    ctrl_series: np.ndarray
    uncontrolled_series: np.ndarray
    baseline_series: np.ndarray
    flag_counts: dict[str, int] = field(default_factory=dict)
    median_closed_form_s: float = math.nan
    median_oracle_s: float = math.nan

    @property
    def timing_ratio(self) -> float:
        if not self.median_closed_form_s > 0:
            return math.nan
        return self.median_oracle_s / self.median_closed_form_s

    @property
    def max_tracking_error_pct(self) -> float:
        vals = [e.tracking_error_pct for e in self.epochs if e.copf_feasible]
        return max(vals, default=math.nan)

    @property
    def max_osc_pu(self) -> float:
        return max((e.max_osc_pu for e in self.epochs), default=0.0)

    @property
    def max_v_violation_pu(self) -> float:
        return max((e.max_v_violation_pu for e in self.epochs), default=0.0)

    @property
    def max_steps_to_converge(self) -> int | None:
        steps = [e.steps_to_converge for e in self.epochs]
        if any(s is None for s in steps):
            return None
        return max(steps, default=0)

    def summary_lines(self) -> list[str]:
        out = [
            f"scenario            {self.name}",
            f"mode                {self.mode.value}",
            f"epochs              {len(self.epochs)}",
            f"max steps to conv.  {self.max_steps_to_converge}",
            f"max tracking error  {self.max_tracking_error_pct:.6g} %",
            f"max oscillation     {self.max_osc_pu:.6g} pu",
            f"max violation       {self.max_v_violation_pu:.6g} pu",
        ]
        if any(e.copf_feasible for e in self.epochs):
            gap = max(e.max_v_gap_pu for e in self.epochs if e.copf_feasible)
            out.append(f"max voltage gap     {gap:.6g} pu")
        infeasible = [e.epoch for e in self.epochs if not e.copf_feasible and e.copf_method]
        if infeasible:
            out.append(f"baseline infeasible in epochs {infeasible}")
        if self.flag_counts:
            out.append("flags               " + ", ".join(f"{k}={v}" for k, v in sorted(self.flag_counts.items())))
        if not math.isnan(self.median_closed_form_s):
            out.append(f"median closed form  {self.median_closed_form_s * 1e6:.3f} us")
            out.append(f"median oracle       {self.median_oracle_s * 1e6:.3f} us")
            out.append(f"oracle / closed     {self.timing_ratio:.1f}x")
        return out


def epoch_ranges(trace: SimulationTrace) -> list[tuple[int, int, int]]:
    """(epoch, first_step, last_step) for every interval touched by the trace."""
    out: list[tuple[int, int, int]] = []
    for rec in trace.records:
        if out and out[-1][0] == rec.interval:
            out[-1] = (rec.interval, out[-1][1], rec.step)
        else:
            out.append((rec.interval, rec.step, rec.step))
    return out


def build_report(trace: SimulationTrace, baseline: bool = True, grid_points: int | None = None) -> RunReport:
    """Summarise ``trace``; with ``baseline`` the centralized reference is solved per epoch."""
    sc = trace.scenario
    mode = sc.mode
    setpoints = trace.setpoints()
    v_sq = trace.voltages()
    uncontrolled = run_uncontrolled(sc)
    unc_series = np.array(
        [
            objective_value(mode, st, default_dispatch(sc.feeder, sc.inputs(k), mode))
            for k, st in enumerate(uncontrolled[: len(trace)])
        ]
    )
    base_series = np.full(len(trace), math.nan)
    epochs = []
    for ep, a, b in epoch_ranges(trace):
        last = trace.records[b]
        rep = dict(
            epoch=ep,
            first_step=a,
            last_step=b,
            steps_to_converge=steps_to_converge(setpoints[a : b + 1]),
            max_osc_pu=oscillation_pu(v_sq[a : b + 1]),
            max_v_violation_pu=last.violations.max_voltage_violation_pu,
            ctrl_objective=last.objective,
            uncontrolled_objective=float(unc_series[b]),
        )
        if baseline:
            res = copf(sc.feeder, last.inputs, objective_for(mode), grid_points)
            rep.update(_compare(res, last.objective, last.state.v_sq))
            base_series[a : b + 1] = res.objective
        epochs.append(EpochReport(**rep))

    report = RunReport(
        name=sc.name,
        mode=mode,
        epochs=epochs,
        ctrl_series=trace.objectives(),
        uncontrolled_series=unc_series,
        baseline_series=base_series,
        flag_counts=summarize_flags(trace),
    )
    if trace.timings:
        report.median_closed_form_s = statistics.median(t.closed_form_s for t in trace.timings)
        report.median_oracle_s = statistics.median(t.oracle_s for t in trace.timings)
    return report


def _compare(res: CentralizedResult, ctrl: float, v_sq: np.ndarray) -> dict:
    if not res.feasible:
        return dict(copf_method=res.method, copf_feasible=False)
    gap = float(np.abs(np.sqrt(v_sq) - np.sqrt(res.state.v_sq)).max())
    return dict(
        copf_objective=res.objective,
        copf_method=res.method,
        copf_feasible=True,
        tracking_error_pct=tracking_error_pct(ctrl, res.objective),
        max_v_gap_pu=gap,
    )
