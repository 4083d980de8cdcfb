"""Centralized reference solutions over the full physical model.

Both methods treat the power-flow solver as a black box: they never touch
the closed-form code paths. Voltage bounds are enforced strictly; ampacity
is reported but not constrained.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .feeder import DerMode, Feeder, StepInputs
from .powerflow import NetworkState, solve_batch, solve_power_flow

Objective = Literal["min_loss", "max_generation"]
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class CentralizedResult:
    dispatch: dict[str, tuple[float, float]]
    state: NetworkState | None
    objective: float
    method: str
    feasible: bool = True
    converged: bool = True
    evaluations: int = 0


def objective_for(mode: DerMode | str) -> Objective:
    return "min_loss" if DerMode.parse(mode) is DerMode.VVC else "max_generation"


class _Problem:
    """Setpoint vector -> (cost, feasible) through batched power-flow solves."""

    def __init__(self, feeder: Feeder, inputs: StepInputs, objective: Objective, tol: float = 1e-10):
        if objective not in ("min_loss", "max_generation"):
            raise ValueError(f"unknown objective {objective!r}")
        self.feeder = feeder
        self.inputs = inputs
        self.objective = objective
        self.tol = tol
        self.buses = feeder.der_buses
        self.cols = np.array([feeder.index[b] for b in self.buses], dtype=int)
        n = len(feeder.order)
        self.p_fixed = np.zeros(n)
        lo, hi = [], []
        for b in self.buses:
            der = feeder.bus(b).der
            p_av = der.p_available(inputs.pv_mult)
            if objective == "min_loss":
                if p_av > der.rating_s:
                    raise ValueError(f"DER at {b!r}: available power exceeds rating")
                self.p_fixed[feeder.index[b]] = p_av
                u = math.sqrt(der.rating_s**2 - p_av**2)
                lo.append(-u)
                hi.append(u)
            else:
                lo.append(0.0)
                hi.append(max(0.0, min(der.rating_s, p_av)))
        self.lower = np.array(lo)
        self.upper = np.array(hi)
        self.evaluations = 0

    def injections(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        p = np.tile(self.p_fixed, (len(x), 1))
        q = np.zeros_like(p)
        if self.objective == "min_loss":
            q[:, self.cols] = x
        else:
            p[:, self.cols] = x
        return p, q

    def evaluate(self, x: np.ndarray, chunk: int = 50_000) -> tuple[np.ndarray, np.ndarray]:
        """Cost (to be minimised) and strict voltage feasibility per row."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cost = np.empty(len(x))
        feas = np.empty(len(x), dtype=bool)
        fa = self.feeder.arrays
        for s in range(0, len(x), chunk):
            rows = x[s : s + chunk]
            p, q = self.injections(rows)
            v, _, _, i_sq, ok, _ = solve_batch(
                self.feeder, p, q, self.inputs.v_root_sq, self.inputs.load_mult, self.tol, strict=False
            )
            with np.errstate(invalid="ignore"):
                inside = np.all((v >= self.inputs.v_min_sq) & (v <= self.inputs.v_max_sq), axis=1)
            feas[s : s + chunk] = ok & inside
            if self.objective == "min_loss":
                cost[s : s + chunk] = i_sq @ fa.r
            else:
                cost[s : s + chunk] = -rows.sum(axis=1)
            cost[s : s + chunk][~ok] = np.inf
        self.evaluations += len(x)
        return cost, feas

    def result(self, x: np.ndarray | None, method: str, converged: bool = True) -> CentralizedResult:
        if x is None:
            return CentralizedResult({}, None, math.nan, method, False, converged, self.evaluations)
        p, q = self.injections(x)
        dispatch = {b: (float(p[0, c]), float(q[0, c])) for b, c in zip(self.buses, self.cols)}
        state = solve_power_flow(self.feeder, dispatch, self.inputs.v_root_sq, self.inputs.load_mult, self.tol)
        if self.objective == "min_loss":
            obj = state.total_loss
        else:
            obj = float(sum(pd for pd, _ in dispatch.values()))
        return CentralizedResult(dispatch, state, obj, method, True, converged, self.evaluations)


def default_grid_points(n_der: int, budget: int = 100_000) -> int:
    if n_der == 0:
        return 1
    return int(min(2001, max(3, math.floor(budget ** (1.0 / n_der)))))


def _best(cost: np.ndarray, feas: np.ndarray) -> int | None:
    if not feas.any():
        return None
    masked = np.where(feas, cost, np.inf)
    # argmin returns the first minimum: lexicographically smallest setpoint on ties
    return int(np.argmin(masked))


def copf_grid_search(
    feeder: Feeder,
    inputs: StepInputs,
    objective: Objective,
    grid_points: int | None = None,
    max_ders: int = 3,
) -> CentralizedResult:
    """Exhaustive search over the setpoint box with one local 10x refinement."""
    prob = _Problem(feeder, inputs, objective)
    k = len(prob.buses)
    if k > max_ders:
        raise ValueError(f"grid search limited to {max_ders} DERs, feeder has {k}")
    if k == 0:
        return prob.result(np.zeros((1, 0)), "grid_search")
    g = grid_points or default_grid_points(k)
    if g < 2:
        raise ValueError("grid_points must be >= 2")
    axes = [np.linspace(lo, hi, g) for lo, hi in zip(prob.lower, prob.upper)]
    pts = np.array(list(itertools.product(*axes)))
    cost, feas = prob.evaluate(pts)
    i = _best(cost, feas)
    if i is None:
        return prob.result(None, "grid_search")
    x_best, c_best = pts[i], cost[i]

    cells = (prob.upper - prob.lower) / (g - 1)
    fine = [
        np.linspace(max(lo, x - c), min(hi, x + c), 21)
        for x, c, lo, hi in zip(x_best, cells, prob.lower, prob.upper)
    ]
    pts2 = np.array(list(itertools.product(*fine)))
    cost2, feas2 = prob.evaluate(pts2)
    j = _best(cost2, feas2)
    if j is not None and cost2[j] < c_best:
        x_best = pts2[j]
    return prob.result(x_best[None], "grid_search")


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10, max_iter: int = 200) -> tuple[float, float]:
    """Minimise a unimodal ``f`` on ``[a, b]``; endpoints are checked too."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x, fx = (c, fc) if fc <= fd else (d, fd)
    return x, fx


def _feasible_interval(prob: _Problem, x: np.ndarray, k: int, scan: int = 41, tol: float = 1e-12) -> tuple[float, float] | None:
    """Feasible range of coordinate ``k`` with the others held at ``x``."""
    lo, hi = prob.lower[k], prob.upper[k]
    grid = np.linspace(lo, hi, scan)
    rows = np.repeat(x[None], scan, axis=0)
    rows[:, k] = grid
    _, feas = prob.evaluate(rows)
    if not feas.any():
        return None
    idx = np.flatnonzero(feas)
    # keep the run containing the current value if possible, else the first run
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    cur = x[k]
    run = next((r for r in runs if grid[r[0]] <= cur <= grid[r[-1]]), runs[0])

    def feasible(c: float) -> bool:
        row = x.copy()
        row[k] = c
        return bool(prob.evaluate(row[None])[1][0])

    def edge(inside: float, outside: float) -> float:
        while abs(inside - outside) > tol:
            mid = 0.5 * (inside + outside)
            if feasible(mid):
                inside = mid
            else:
                outside = mid
        return inside

    a = grid[run[0]] if run[0] == 0 else edge(grid[run[0]], grid[run[0] - 1])
    b = grid[run[-1]] if run[-1] == scan - 1 else edge(grid[run[-1]], grid[run[-1] + 1])
    return a, b


def copf_coordinate_descent(
    feeder: Feeder,
    inputs: StepInputs,
    objective: Objective,
    tol: float = 1e-10,
    max_sweeps: int = 100,
    start: np.ndarray | None = None,
) -> CentralizedResult:
    """Cyclic golden-section search on one setpoint at a time.

    Each coordinate is restricted to its voltage-feasible interval before
    the line search. Stops when a full sweep improves the cost by less than
    ``tol``; may stall at a local optimum on large feeders.
    """
    prob = _Problem(feeder, inputs, objective)
    k = len(prob.buses)
    if k == 0:
        return prob.result(np.zeros((1, 0)), "coordinate_descent")
    x = np.clip(np.zeros(k) if start is None else np.asarray(start, dtype=float), prob.lower, prob.upper)
    cost, feas = prob.evaluate(x[None])
    f_x = cost[0] if feas[0] else np.inf
    converged = False
    for _ in range(max_sweeps):
        f_start = f_x
        for j in range(k):
            span = _feasible_interval(prob, x, j)
            if span is None:
                continue
            a, b = span

            def f(c: float, j: int = j) -> float:
                row = x.copy()
                row[j] = c
                cst, fs = prob.evaluate(row[None])
                return cst[0] if fs[0] else np.inf

            cands = [golden_section(f, a, b, tol=1e-12), (a, f(a)), (b, f(b))]
            c_best, f_best = min(cands, key=lambda t: t[1])
            if f_best <= f_x:
                x[j], f_x = c_best, f_best
        if np.isfinite(f_x) and f_start - f_x < tol:
            converged = True
            break
    if not np.isfinite(f_x):
        return prob.result(None, "coordinate_descent", converged=False)
    return prob.result(x[None], "coordinate_descent", converged=converged)


def copf(
    feeder: Feeder,
    inputs: StepInputs,
    objective: Objective,
    grid_points: int | None = None,
    max_grid_ders: int = 3,
) -> CentralizedResult:
    """Grid search when tractable, coordinate descent otherwise."""
    if len(feeder.der_buses) <= max_grid_ders:
        return copf_grid_search(feeder, inputs, objective, grid_points, max_grid_ders)
    return copf_coordinate_descent(feeder, inputs, objective)
