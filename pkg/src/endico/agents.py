"""Per-DER agents and the bulk-synchronous simulation loop.

Each controller step has three phases:

1. every agent computes its setpoint from the boundary values it received
   at the end of the previous step (no agent sees another's new setpoint);
2. the setpoints are applied and the physical feeder is solved;
3. agents read their parent's voltage and their children's line flows.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import closedform
from .closedform import NodeSubproblem, build_subproblem
from .feeder import DerMode, DerSpec, Feeder, Line, Scenario, StepInputs
from .powerflow import (
    DispatchSet,
    NetworkState,
    PowerFlowError,
    ViolationReport,
    check_operational_limits,
    solve_power_flow,
)

log = logging.getLogger(__name__)


def fpi_smooth(current, previous, alpha: float):
    """Weighted fixed-point average ``(current + alpha * previous) / (1 + alpha)``.

    Works componentwise on scalars or arrays.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        return current
    return (current + alpha * previous) / (1.0 + alpha)


@dataclass(frozen=True)
class NeighborSnapshot:
    """Boundary values observed at one agent: parent voltage, child flows.

    ``prev_*`` hold the step-before values fed to the smoothing: the raw
    earlier measurement, or the previously smoothed value when smoothing
    is recursive.
    """

    parent_v_sq: float
    child_flows: tuple[tuple[float, float], ...]
    prev_parent_v_sq: float
    prev_child_flows: tuple[tuple[float, float], ...]

    @classmethod
    def observe(cls, feeder: Feeder, bus: str, state: NetworkState) -> NeighborSnapshot:
        v = state.v(feeder.bus(bus).parent)
        flows = state.child_flows(bus)
        return cls(v, flows, v, flows)


@dataclass(frozen=True)
class AgentState:
    bus: str
    mode: DerMode
    snapshot: NeighborSnapshot
    dispatch: float
    alpha: float = 0.0
    flags: frozenset[str] = frozenset()
    smooth_voltage: bool = True
    smooth_flows: bool = True
    recursive: bool = True
    # boundary values actually used by the last solve
    used_v_sq: float | None = None
    used_child_flows: tuple[tuple[float, float], ...] | None = None

    def boundary(self) -> tuple[float, tuple[tuple[float, float], ...]]:
        """Parent voltage and per-child flows after smoothing."""
        snap = self.snapshot
        v = snap.parent_v_sq
        if self.smooth_voltage:
            v = fpi_smooth(snap.parent_v_sq, snap.prev_parent_v_sq, self.alpha)
        flows = snap.child_flows
        if self.smooth_flows:
            flows = tuple(
                (fpi_smooth(p, pp, self.alpha), fpi_smooth(q, qq, self.alpha))
                for (p, q), (pp, qq) in zip(snap.child_flows, snap.prev_child_flows)
            )
        return v, flows

    def receive(self, feeder: Feeder, state: NetworkState) -> AgentState:
        """Exchange phase: take the new measurements from parent and children."""
        snap = self.snapshot
        if self.recursive and self.used_v_sq is not None:
            prev_v, prev_flows = self.used_v_sq, self.used_child_flows
        else:
            prev_v, prev_flows = snap.parent_v_sq, snap.child_flows
        new = NeighborSnapshot(state.v(feeder.bus(self.bus).parent), state.child_flows(self.bus), prev_v, prev_flows)
        return replace(self, snapshot=new)


def agent_subproblem(
    state: AgentState,
    line: Line,
    load: tuple[float, float],
    der: DerSpec,
    p_avail: float,
    bounds: tuple[float, float],
) -> NodeSubproblem:
    v_up, flows = state.boundary()
    return build_subproblem(state.bus, state.mode, v_up, flows, load, p_avail, der.rating_s, line, bounds)


def agent_step(
    state: AgentState,
    line: Line,
    load: tuple[float, float],
    der: DerSpec,
    p_avail: float,
    bounds: tuple[float, float],
) -> tuple[float, AgentState]:
    """Smooth the boundary values, solve the local problem, record the setpoint.

    ``load`` is the bus load already scaled by the step's multiplier.
    """
    v_up, flows = state.boundary()
    sp = build_subproblem(state.bus, state.mode, v_up, flows, load, p_avail, der.rating_s, line, bounds)
    decision = closedform.dispatch(sp, previous=state.dispatch)
    new = replace(state, dispatch=decision.value, flags=decision.flags, used_v_sq=v_up, used_child_flows=flows)
    return decision.value, new


# ---------------------------------------------------------------------------
# simulation


def default_dispatch(feeder: Feeder, inputs: StepInputs, mode: DerMode | str) -> dict[str, tuple[float, float]]:
    """Setpoints without a controller: zero vars (VVC) or full PV output (VWC)."""
    mode = DerMode.parse(mode)
    out = {}
    for b in feeder.der_buses:
        der = feeder.bus(b).der
        p = der.p_available(inputs.pv_mult)
        out[b] = (p, 0.0) if mode is DerMode.VVC else (min(p, der.rating_s), 0.0)
    return out


def uncontrolled_state(feeder: Feeder, inputs: StepInputs, mode: DerMode | str, tol: float = 1e-10) -> NetworkState:
    return solve_power_flow(feeder, default_dispatch(feeder, inputs, mode), inputs.v_root_sq, inputs.load_mult, tol)


def objective_value(mode: DerMode, state: NetworkState, dispatch: DispatchSet) -> float:
    """Total line loss (VVC) or total DER active output (VWC)."""
    if mode is DerMode.VVC:
        return state.total_loss
    return float(sum(p for p, _ in dispatch.values()))


@dataclass(frozen=True)
class StepRecord:
    step: int
    interval: int
    inputs: StepInputs
    dispatch: dict[str, tuple[float, float]]
    state: NetworkState
    objective: float
    violations: ViolationReport
    flags: dict[str, frozenset[str]]


@dataclass(frozen=True)
class NodeTiming:
    step: int
    bus: str
    closed_form_s: float
    oracle_s: float


@dataclass
class SimulationTrace:
    scenario: Scenario
    initial: NetworkState
    records: list[StepRecord] = field(default_factory=list)
    timings: list[NodeTiming] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def der_buses(self) -> tuple[str, ...]:
        return self.scenario.feeder.der_buses

    def setpoints(self) -> np.ndarray:
        """Controlled setpoint per step and DER, shape (steps, n_der)."""
        k = 1 if self.scenario.mode is DerMode.VVC else 0
        return np.array([[r.dispatch[b][k] for b in self.der_buses] for r in self.records]).reshape(
            len(self.records), len(self.der_buses)
        )

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def voltages(self) -> np.ndarray:
        """Squared voltages, shape (steps, n_bus) in ``feeder.order``."""
        return np.array([r.state.v_sq for r in self.records])


class SimulationError(RuntimeError):
    def __init__(self, step: int, trace: SimulationTrace, cause: Exception):
        super().__init__(f"simulation aborted at step {step}: {cause}")
        self.step = step
        self.trace = trace


def _load(feeder: Feeder, bus: str, mult: float) -> tuple[float, float]:
    b = feeder.bus(bus)
    return b.load_p * mult, b.load_q * mult


def run_simulation(scenario: Scenario, timing: bool = False, tol: float = 1e-10, oracle_scan: int = 2001) -> SimulationTrace:
    """Run the distributed controller over the scenario horizon.

    With ``timing`` set, each agent's closed-form solve and a numeric-oracle
    solve of the same subproblem are both timed.
    """
    feeder = scenario.feeder
    mode = scenario.mode
    bounds = (scenario.v_min_sq, scenario.v_max_sq)
    inputs0 = scenario.inputs(0)
    initial = uncontrolled_state(feeder, inputs0, mode, tol)
    init_dispatch = default_dispatch(feeder, inputs0, mode)
    agents = {
        b: AgentState(
            bus=b,
            mode=mode,
            snapshot=NeighborSnapshot.observe(feeder, b, initial),
            dispatch=init_dispatch[b][1 if mode is DerMode.VVC else 0],
            alpha=scenario.alpha,
            smooth_voltage=scenario.smooth_voltage,
            smooth_flows=scenario.smooth_flows,
            recursive=scenario.recursive_fpi,
        )
        for b in feeder.der_buses
    }
    trace = SimulationTrace(scenario, initial)
    objective_kind = "min_x4" if mode is DerMode.VVC else "max_x5"

    for t in range(scenario.horizon):
        inputs = scenario.inputs(t)
        stepped: dict[str, AgentState] = {}
        dispatch: dict[str, tuple[float, float]] = {}
        # compute phase: reads only the snapshots from the previous exchange
        for b, agent in agents.items():
            der = feeder.bus(b).der
            p_avail = der.p_available(inputs.pv_mult)
            line = feeder.line_to(b)
            load = _load(feeder, b, inputs.load_mult)
            if timing:
                sp = agent_subproblem(agent, line, load, der, p_avail, bounds)
                t0 = time.perf_counter()
                closedform.dispatch(sp, previous=agent.dispatch)
                t1 = time.perf_counter()
                closedform.node_numeric_oracle(sp, objective_kind, n_scan=oracle_scan)
                t2 = time.perf_counter()
                trace.timings.append(NodeTiming(t, b, t1 - t0, t2 - t1))
            value, stepped[b] = agent_step(agent, line, load, der, p_avail, bounds)
            dispatch[b] = (p_avail, value) if mode is DerMode.VVC else (value, 0.0)

        try:
            state = solve_power_flow(feeder, dispatch, inputs.v_root_sq, inputs.load_mult, tol)
        except PowerFlowError as exc:
            raise SimulationError(t, trace, exc) from exc
        trace.records.append(
            StepRecord(
                step=t,
                interval=scenario.interval(t),
                inputs=inputs,
                dispatch=dispatch,
                state=state,
                objective=objective_value(mode, state, dispatch),
                violations=check_operational_limits(state, inputs),
                flags={b: a.flags for b, a in stepped.items()},
            )
        )
        for b, a in stepped.items():
            if a.flags & {"fallback", "lower_clamp"}:
                log.debug("step %d bus %s flags %s", t, b, sorted(a.flags))
        # exchange phase
        agents = {b: a.receive(feeder, state) for b, a in stepped.items()}
    return trace


def run_uncontrolled(scenario: Scenario, tol: float = 1e-10) -> list[NetworkState]:
    """Physical states per step with the default (uncontrolled) setpoints."""
    cache: dict[int, NetworkState] = {}
    out = []
    for t in range(scenario.horizon):
        k = scenario.interval(t)
        if k not in cache:
            cache[k] = uncontrolled_state(scenario.feeder, scenario.inputs(t), scenario.mode, tol)
        out.append(cache[k])
    return out


def summarize_flags(trace: SimulationTrace) -> dict[str, int]:
    counts: dict[str, int] = {}
    for rec in trace.records:
        for fl in rec.flags.values():
            for f in fl:
                counts[f] = counts.get(f, 0) + 1
    return counts

