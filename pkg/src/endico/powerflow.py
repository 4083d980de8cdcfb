"""Branch-flow (DistFlow) ground truth for radial feeders.

The solver is a backward/forward sweep over the exact nonlinear equations

    P_ij - r l_ij - p_Lj + p_Dj = sum_k P_jk
    Q_ij - x l_ij - q_Lj + q_Dj = sum_k Q_jk
    v_j = v_i - 2 (r P_ij + x Q_ij) + (r^2 + x^2) l_ij
    v_i l_ij = P_ij^2 + Q_ij^2

vectorised over a batch of dispatches so the centralized baselines can
evaluate many candidate setpoints per call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Protocol

import numpy as np

from .feeder import DerMode, Feeder

DispatchSet = Mapping[str, tuple[float, float]]


class PowerFlowError(RuntimeError):
    """Sweep did not converge within ``max_iter``."""


class VoltageCollapseError(PowerFlowError):
    """A squared voltage became nonpositive during the sweep."""


@dataclass(frozen=True, eq=False)
class NetworkState:
    """One physical snapshot. Line quantities are indexed by receiving bus.

    Arrays follow ``feeder.order``; the root's line slots hold zeros.
    """

    feeder: Feeder = field(repr=False)
    v_sq: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    i_sq: np.ndarray
    iterations: int = 0

    def v(self, bus: str) -> float:
        return float(self.v_sq[self.feeder.index[bus]])

    def line(self, to_bus: str) -> tuple[float, float, float]:
        k = self.feeder.index[to_bus]
        return float(self.p_flow[k]), float(self.q_flow[k]), float(self.i_sq[k])

    def child_flows(self, bus: str) -> tuple[tuple[float, float], ...]:
        idx = self.feeder.index
        return tuple((float(self.p_flow[idx[c]]), float(self.q_flow[idx[c]])) for c in self.feeder.bus(bus).children)

    @property
    def total_loss(self) -> float:
        return float(np.dot(self.feeder.arrays.r, self.i_sq))

    @property
    def v_pu(self) -> np.ndarray:
        return np.sqrt(self.v_sq)

    @classmethod
    def zeros(cls, feeder: Feeder) -> NetworkState:
        n = len(feeder.order)
        return cls(feeder, np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))

    def same_as(self, other: NetworkState) -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("v_sq", "p_flow", "q_flow", "i_sq")
        )


def injection_arrays(feeder: Feeder, dispatch: DispatchSet) -> tuple[np.ndarray, np.ndarray]:
    """Map a dispatch set to per-bus (p_D, q_D) arrays in topological order."""
    p = np.zeros(len(feeder.order))
    q = np.zeros(len(feeder.order))
    ders = set(feeder.der_buses)
    for bus, (pd, qd) in dispatch.items():
        if bus not in ders:
            raise ValueError(f"dispatch for bus {bus!r} which has no DER")
        k = feeder.index[bus]
        p[k], q[k] = pd, qd
    return p, q


def check_dispatch(feeder: Feeder, dispatch: DispatchSet, pv_mult: float, atol: float = 1e-12) -> None:
    """Raise ValueError if any setpoint leaves its capability region."""
    for bus, (pd, qd) in dispatch.items():
        der = feeder.bus(bus).der
        if der is None:
            raise ValueError(f"dispatch for bus {bus!r} which has no DER")
        p_av = der.p_available(pv_mult)
        if der.mode is DerMode.VVC:
            q_max = np.sqrt(max(der.rating_s**2 - p_av**2, 0.0))
            if abs(pd - p_av) > atol or abs(qd) > q_max + atol:
                raise ValueError(f"VVC dispatch at {bus!r} outside capability: p={pd}, q={qd}")
        else:
            if qd != 0.0 or pd < -atol or pd > min(der.rating_s, p_av) + atol:
                raise ValueError(f"VWC dispatch at {bus!r} outside capability: p={pd}, q={qd}")


def solve_batch(
    feeder: Feeder,
    p_inj: np.ndarray,
    q_inj: np.ndarray,
    v_root_sq: float = 1.0,
    load_mult: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 100,
    strict: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    """Sweep a batch of injection vectors, shape (m, n_bus).

    Returns ``(v_sq, p_flow, q_flow, i_sq, ok, iterations)``. Convergence
    requires both the largest voltage update and the largest residual of
    ``v_i l = P^2 + Q^2`` to fall to ``tol``; the other three equations hold
    exactly by construction of each sweep.

    With ``strict=False`` rows that collapse or fail to converge are marked
    ``ok=False`` (and filled with NaN) instead of raising.
    """
    fa = feeder.arrays
    p_inj = np.atleast_2d(np.asarray(p_inj, dtype=float))
    q_inj = np.atleast_2d(np.asarray(q_inj, dtype=float))
    m, n = p_inj.shape
    demand_p = fa.load_p * load_mult - p_inj
    demand_q = fa.load_q * load_mult - q_inj
    z_sq = fa.r**2 + fa.x**2
    tree_t = fa.subtree.T
    par = fa.parent.copy()
    par[0] = 0

    ok = np.ones(m, dtype=bool)
    i_sq = np.zeros((m, n))
    v_prev = np.full((m, n), float(v_root_sq))
    for it in range(1, max_iter + 1):
        p_flow = (demand_p + fa.r * i_sq) @ tree_t
        q_flow = (demand_q + fa.x * i_sq) @ tree_t
        p_flow[:, 0] = 0.0
        q_flow[:, 0] = 0.0
        drop = 2.0 * (fa.r * p_flow + fa.x * q_flow) - z_sq * i_sq
        v_sq = v_root_sq - drop @ fa.subtree
        with np.errstate(invalid="ignore"):
            collapsed = ok & ~np.all(v_sq > 0, axis=1)
        if collapsed.any():
            if strict:
                bad = int(np.nanargmin(v_sq[collapsed].min(axis=0)))
                raise VoltageCollapseError(
                    f"voltage collapse at bus {fa.ids[bad]!r} on sweep {it} (v_sq={np.nanmin(v_sq):.4g})"
                )
            ok &= ~collapsed
        v_sq[~ok] = np.nan
        v_par = v_sq[:, par]
        flow_sq = p_flow**2 + q_flow**2
        resid = np.abs(v_par * i_sq - flow_sq)
        resid[:, 0] = 0.0
        dv = np.abs(v_sq - v_prev)
        done = ok & (resid.max(axis=1) <= tol) & (dv.max(axis=1) <= tol)
        if np.array_equal(done, ok):
            return v_sq, p_flow, q_flow, i_sq, ok, it
        i_sq = flow_sq / v_par
        i_sq[:, 0] = 0.0
        i_sq[~ok] = 0.0
        v_prev = v_sq
    if strict:
        raise PowerFlowError(f"backward/forward sweep did not converge in {max_iter} iterations")
    ok &= done
    v_sq[~ok] = np.nan
    return v_sq, p_flow, q_flow, i_sq, ok, max_iter


def solve_power_flow(
    feeder: Feeder,
    dispatch: DispatchSet,
    v_root_sq: float = 1.0,
    load_mult: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> NetworkState:
    if tol <= 0:
        raise ValueError("tol must be positive")
    p, q = injection_arrays(feeder, dispatch)
    v, pf, qf, l, _, it = solve_batch(feeder, p[None], q[None], v_root_sq, load_mult, tol, max_iter)
    return NetworkState(feeder, v[0], pf[0], qf[0], l[0], it)


class Residuals(NamedTuple):
    active: float
    reactive: float
    voltage: float
    current: float

    def max(self) -> float:
        return max(self)


def branch_flow_residual(
    feeder: Feeder, state: NetworkState, dispatch: DispatchSet, load_mult: float = 1.0
) -> Residuals:
    """Largest absolute residual of each of the four branch-flow equations."""
    fa = feeder.arrays
    if state.v_sq.shape != fa.r.shape:
        raise ValueError("state does not match feeder dimensions")
    p_inj, q_inj = injection_arrays(feeder, dispatch)
    lines = slice(1, None)
    par = fa.parent[lines]
    # direct-children incidence: C[i, j] = 1 if parent(j) == i
    child = np.zeros_like(fa.subtree)
    child[par, np.arange(1, len(fa.ids))] = 1.0
    sum_p = child @ state.p_flow
    sum_q = child @ state.q_flow
    r, x, l = fa.r[lines], fa.x[lines], state.i_sq[lines]
    P, Q = state.p_flow[lines], state.q_flow[lines]
    res_p = P - r * l - fa.load_p[lines] * load_mult + p_inj[lines] - sum_p[lines]
    res_q = Q - x * l - fa.load_q[lines] * load_mult + q_inj[lines] - sum_q[lines]
    v_i = state.v_sq[par]
    res_v = state.v_sq[lines] - (v_i - 2.0 * (r * P + x * Q) + (r**2 + x**2) * l)
    res_i = v_i * l - (P**2 + Q**2)
    if res_p.size == 0:
        return Residuals(0.0, 0.0, 0.0, 0.0)
    return Residuals(*(float(np.max(np.abs(a))) for a in (res_p, res_q, res_v, res_i)))


def substation_power(feeder: Feeder, state: NetworkState, load_mult: float = 1.0) -> tuple[float, float]:
    """Active/reactive power drawn from the substation (root load included)."""
    fa = feeder.arrays
    kids = [feeder.index[c] for c in feeder.bus(feeder.root).children]
    return (
        float(state.p_flow[kids].sum() + fa.load_p[0] * load_mult),
        float(state.q_flow[kids].sum() + fa.load_q[0] * load_mult),
    )


# ---------------------------------------------------------------------------
# operational limits


class VoltageBounds(Protocol):
    v_min_sq: float
    v_max_sq: float


@dataclass(frozen=True)
class VoltageViolation:
    bus: str
    v_sq: float
    excess_sq: float
    excess_pu: float
    kind: str  # "high" | "low"


@dataclass(frozen=True)
class CurrentViolation:
    to_bus: str
    i_sq: float
    excess_sq: float


@dataclass(frozen=True)
class ViolationReport:
    voltage: tuple[VoltageViolation, ...] = ()
    current: tuple[CurrentViolation, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.voltage or self.current)

    @property
    def max_voltage_violation_pu(self) -> float:
        return max((v.excess_pu for v in self.voltage), default=0.0)

    @property
    def max_voltage_violation_sq(self) -> float:
        return max((v.excess_sq for v in self.voltage), default=0.0)


def check_operational_limits(state: NetworkState, bounds: VoltageBounds) -> ViolationReport:
    """List buses outside the squared-voltage band and overloaded lines.

    ``bounds`` is anything carrying ``v_min_sq``/``v_max_sq`` (a Scenario or
    StepInputs). Ampacity comes from the state's feeder.
    """
    fa = state.feeder.arrays
    vmin, vmax = bounds.v_min_sq, bounds.v_max_sq
    volt = []
    for k, bus in enumerate(fa.ids):
        v = float(state.v_sq[k])
        if v > vmax:
            volt.append(VoltageViolation(bus, v, v - vmax, float(np.sqrt(v) - np.sqrt(vmax)), "high"))
        elif v < vmin:
            volt.append(VoltageViolation(bus, v, vmin - v, float(np.sqrt(vmin) - np.sqrt(max(v, 0.0))), "low"))
    cur = [
        CurrentViolation(fa.ids[k], float(state.i_sq[k]), float(state.i_sq[k] - fa.ampacity_sq[k]))
        for k in range(1, len(fa.ids))
        if state.i_sq[k] > fa.ampacity_sq[k]
    ]
    return ViolationReport(tuple(volt), tuple(cur))
