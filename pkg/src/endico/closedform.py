"""Closed-form node-level dispatch for Volt-Var and Volt-Watt control.

Each agent reduces the network around its incoming line ``i -> j`` to five
variables ``x = (P_ij, Q_ij, v_j, l_ij, x5)`` where ``x5`` is the DER
reactive setpoint (VVC) or active setpoint (VWC). Three linear equalities
leave a one-parameter family on the ellipse

    (a + z1 x4)^2 + (b + z2 x4)^2 = V x4

with ``(a, b) = (P, Q - x5)`` for VVC and ``(P - x5, Q)`` for VWC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .feeder import DerMode, Line

INF = math.inf


class ClosedFormError(ArithmeticError):
    """Base class for signals raised by the closed-form expressions."""


class NegativeDiscriminantError(ClosedFormError):
    """The relaxed minimum-current point does not exist for these constants."""


class VoltageBoundUnreachable(ClosedFormError):
    """The approximated voltage never reaches the upper bound: projection inactive."""


class UnsupportedLineError(ClosedFormError):
    """The projection divides by a zero impedance component."""


class CapabilityError(ValueError):
    """Available PV power exceeds the inverter's apparent-power rating."""


@dataclass(frozen=True)
class NodeSubproblem:
    """Constants and box limits of one agent's reduced problem.

    ``lower``/``upper`` bound ``(P_ij, Q_ij, v_j, l_ij, x5)``.
    """

    mode: DerMode
    big_p: float
    big_q: float
    v_up: float
    z1: float
    z2: float
    lower: tuple[float, float, float, float, float]
    upper: tuple[float, float, float, float, float]
    bus: str = ""

    def __post_init__(self) -> None:
        if not self.v_up > 0:
            raise ValueError(f"subproblem {self.bus!r}: parent voltage must be positive")
        if not self.z_sq > 0:
            raise ValueError(f"subproblem {self.bus!r}: line impedance must be nonzero")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"subproblem {self.bus!r}: lower bound above upper bound")

    @property
    def z_sq(self) -> float:
        return self.z1 * self.z1 + self.z2 * self.z2

    @property
    def l3(self) -> float:
        return self.lower[2]

    @property
    def u3(self) -> float:
        return self.upper[2]

    @property
    def l5(self) -> float:
        return self.lower[4]

    @property
    def u5(self) -> float:
        return self.upper[4]


def build_subproblem(
    bus: str,
    mode: DerMode | str,
    parent_v_sq: float,
    child_flows: Sequence[tuple[float, float]],
    load: tuple[float, float],
    der_available: float,
    der_rating: float,
    line: Line,
    voltage_bounds: tuple[float, float],
) -> NodeSubproblem:
    """Assemble the aggregated constants for the agent at ``bus``.

    VVC folds the measured PV output into P and bounds q_D by the remaining
    inverter capability; VWC keeps P free of the DER and bounds p_D by the
    available power.
    """
    mode = DerMode.parse(mode)
    if not parent_v_sq > 0:
        raise ValueError(f"bus {bus!r}: parent voltage must be positive, got {parent_v_sq}")
    sum_p = math.fsum(p for p, _ in child_flows)
    sum_q = math.fsum(q for _, q in child_flows)
    load_p, load_q = load
    big_q = sum_q + load_q
    if mode is DerMode.VVC:
        if der_available > der_rating:
            raise CapabilityError(
                f"DER at bus {bus!r}: available power {der_available} exceeds rating {der_rating}"
            )
        big_p = sum_p + load_p - der_available
        u5 = math.sqrt(der_rating**2 - der_available**2)
        l5 = -u5
    else:
        big_p = sum_p + load_p
        u5 = max(0.0, min(der_rating, der_available))
        l5 = 0.0
    l3, u3 = voltage_bounds
    return NodeSubproblem(
        mode=mode,
        big_p=big_p,
        big_q=big_q,
        v_up=parent_v_sq,
        z1=line.r,
        z2=line.x,
        lower=(-INF, -INF, l3, 0.0, l5),
        upper=(INF, INF, u3, line.ampacity_sq, u5),
        bus=bus,
    )


# ---------------------------------------------------------------------------
# geometry of the solution space


def _offsets(sp: NodeSubproblem, x5):
    if sp.mode is DerMode.VVC:
        return sp.big_p, sp.big_q - x5
    return sp.big_p - x5, sp.big_q


def linear_solution(sp: NodeSubproblem, x4, x5) -> np.ndarray:
    """Full variable vector from the two free parameters (x4, x5)."""
    a, b = _offsets(sp, x5)
    x1 = a + sp.z1 * x4
    x2 = b + sp.z2 * x4
    x3 = sp.v_up - 2.0 * (sp.z1 * x1 + sp.z2 * x2) + sp.z_sq * x4
    return np.array([x1, x2, x3, x4, x5], dtype=float)


def ellipse_residual(sp: NodeSubproblem, x4, x5):
    a, b = _offsets(sp, x5)
    return (a + sp.z1 * x4) ** 2 + (b + sp.z2 * x4) ** 2 - sp.v_up * x4


def exact_x4(sp: NodeSubproblem, x5):
    """Low-current root of the ellipse in x4 for given x5 (NaN if none)."""
    x5 = np.asarray(x5, dtype=float)
    a, b = _offsets(sp, x5)
    lin = 2.0 * (sp.z1 * a + sp.z2 * b) - sp.v_up
    const = a * a + b * b
    disc = lin * lin - 4.0 * sp.z_sq * const
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.sqrt(disc)
        root = np.where(lin < 0, 2.0 * const / (-lin + s), (-lin - s) / (2.0 * sp.z_sq))
    root = np.where(disc >= 0, root, np.nan)
    return root if root.ndim else float(root)


def approx_x4(sp: NodeSubproblem, x5):
    """Loss-free current estimate used inside the voltage projections."""
    a, b = _offsets(sp, x5)
    return (a * a + b * b) / sp.v_up


def node_voltage(sp: NodeSubproblem, x4, x5):
    a, b = _offsets(sp, x5)
    return sp.v_up - 2.0 * (sp.z1 * a + sp.z2 * b) - sp.z_sq * x4


@dataclass(frozen=True)
class ConicDescriptor:
    """``A x4^2 + B x4 x5 + C x5^2 + D x4 + E x5 + F = 0`` plus its geometry."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    theta: float
    center_x4: float
    center_x5: float
    degenerate: bool = False

    @property
    def discriminant(self) -> float:
        return self.b * self.b - 4.0 * self.a * self.c

    def gradient(self, x4: float, x5: float) -> tuple[float, float]:
        return (
            2.0 * self.a * x4 + self.b * x5 + self.d,
            self.b * x4 + 2.0 * self.c * x5 + self.e,
        )


def conic_descriptor(sp: NodeSubproblem) -> ConicDescriptor:
    P, Q, V, z1, z2 = sp.big_p, sp.big_q, sp.v_up, sp.z1, sp.z2
    A, C = sp.z_sq, 1.0
    D = 2.0 * P * z1 + 2.0 * Q * z2 - V
    F = P * P + Q * Q
    if sp.mode is DerMode.VVC:
        B, E = -2.0 * z2, -2.0 * Q
    else:
        B, E = -2.0 * z1, -2.0 * P
    theta = 0.5 * math.atan2(B, A - C)
    disc = B * B - 4.0 * A * C
    if disc == 0.0:
        return ConicDescriptor(A, B, C, D, E, F, theta, math.nan, math.nan, degenerate=True)
    if sp.mode is DerMode.VVC:
        cx4 = (V - 2.0 * P * z1) / (2.0 * z1 * z1)
        cx5 = (V * z2 + 2.0 * Q * z1 * z1 - 2.0 * P * z1 * z2) / (2.0 * z1 * z1)
    else:
        cx4 = (V - 2.0 * Q * z2) / (2.0 * z2 * z2)
        cx5 = (V * z1 + 2.0 * P * z2 * z2 - 2.0 * Q * z1 * z2) / (2.0 * z2 * z2)
    return ConicDescriptor(A, B, C, D, E, F, theta, cx4, cx5)


def printed_orientation(sp: NodeSubproblem) -> float:
    """Orientation expression with ``sqrt((z^2 - 1) + 4 z2^2)`` exactly as typeset.

    Diagnostic only. The radicand is negative for realistic impedances, so
    this usually returns NaN; see :func:`corrected_orientation`.
    """
    rad = (sp.z_sq - 1.0) + 4.0 * sp.z2**2
    if rad < 0 or sp.z2 == 0:
        return math.nan
    return math.atan(-(1.0 - sp.z_sq - math.sqrt(rad)) / (2.0 * sp.z2))


def corrected_orientation(sp: NodeSubproblem) -> float:
    """Same expression with the radicand squared, ``(z^2 - 1)^2 + 4 z2^2``.

    Equals the standard conic rotation modulo pi/2 (VVC coefficients).
    """
    if sp.z2 == 0:
        return 0.0
    rad = (sp.z_sq - 1.0) ** 2 + 4.0 * sp.z2**2
    return math.atan(-(1.0 - sp.z_sq - math.sqrt(rad)) / (2.0 * sp.z2))


# ---------------------------------------------------------------------------
# closed-form pieces


def vvc_unconstrained(sp: NodeSubproblem) -> tuple[float, float]:
    """Minimum-current point of the VVC ellipse, ignoring all boxes.

    Uses the rationalised form ``2 P^2 / (V - 2 P z1 + sqrt(V^2 - 4 V P z1))``
    of the smaller root, which stays accurate for tiny resistances and
    reduces to ``P^2 / V`` when ``z1 = 0``.
    """
    P, Q, V, z1 = sp.big_p, sp.big_q, sp.v_up, sp.z1
    disc = V * V - 4.0 * V * P * z1
    if disc < 0:
        raise NegativeDiscriminantError(
            f"bus {sp.bus!r}: V^2 - 4 V P z1 = {disc:.6g} < 0; no minimum-current point"
        )
    x4 = 2.0 * P * P / (V - 2.0 * P * z1 + math.sqrt(disc))
    return x4, Q + sp.z2 * x4


class QuadraticCoefficients(NamedTuple):
    a_coef: float
    b_coef: float
    c_coef: float


def vvc_projection_coefficients(sp: NodeSubproblem) -> QuadraticCoefficients:
    P, Q, V, z1, z2, u3 = sp.big_p, sp.big_q, sp.v_up, sp.z1, sp.z2, sp.u3
    if not z2 > 0:
        raise UnsupportedLineError(f"bus {sp.bus!r}: VVC projection needs x > 0")
    zz = sp.z_sq
    a1 = zz / (2.0 * z2 * V)
    b1 = -(zz * Q / (z2 * V) + 1.0)
    c1 = Q + (z1 / z2) * P + (u3 - V) / (2.0 * z2) + zz * (P * P + Q * Q) / (2.0 * z2 * V)
    return QuadraticCoefficients(a1, b1, c1)


def vwc_projection_coefficients(sp: NodeSubproblem) -> QuadraticCoefficients:
    P, Q, V, z1, z2, u3 = sp.big_p, sp.big_q, sp.v_up, sp.z1, sp.z2, sp.u3
    if not z1 > 0:
        raise UnsupportedLineError(f"bus {sp.bus!r}: VWC projection needs r > 0")
    zz = sp.z_sq
    a2 = zz / (2.0 * z1 * V)
    b2 = -(zz * P / (z1 * V) + 1.0)
    c2 = P + (z2 / z1) * Q + (u3 - V) / (2.0 * z1) + zz * (P * P + Q * Q) / (2.0 * z1 * V)
    return QuadraticCoefficients(a2, b2, c2)


def _smaller_root(coef: QuadraticCoefficients, bus: str) -> float:
    a, b, c = coef
    disc = b * b - 4.0 * a * c
    if disc < 0:
        raise VoltageBoundUnreachable(f"bus {bus!r}: projection discriminant {disc:.6g} < 0")
    s = math.sqrt(disc)
    # avoid cancellation in -b - s when b < 0
    if b < 0:
        return 2.0 * c / (-b + s)
    return (-b - s) / (2.0 * a)


def vvc_voltage_projection(sp: NodeSubproblem) -> float:
    """Largest q_D keeping the approximated node voltage at or below u3."""
    return _smaller_root(vvc_projection_coefficients(sp), sp.bus)


def vwc_voltage_projection(sp: NodeSubproblem) -> float:
    """Largest p_D keeping the approximated node voltage at or below u3."""
    return _smaller_root(vwc_projection_coefficients(sp), sp.bus)


class Decision(NamedTuple):
    value: float
    flags: frozenset[str] = frozenset()


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def vvc_dispatch(sp: NodeSubproblem, previous: float | None = None) -> Decision:
    """Loss-minimising reactive setpoint, projected on voltage and capability.

    ``min(x5_unb, x5_vub, u5)`` is clamped below at ``l5``. When the relaxed
    point does not exist the previous setpoint is held and flagged.
    """
    if sp.mode is not DerMode.VVC:
        raise ValueError("vvc_dispatch needs a VVC subproblem")
    flags = set()
    try:
        _, x5_unb = vvc_unconstrained(sp)
    except NegativeDiscriminantError:
        held = 0.0 if previous is None else previous
        return Decision(_clamp(held, sp.l5, sp.u5), frozenset({"fallback"}))
    try:
        x5_vub = vvc_voltage_projection(sp)
    except VoltageBoundUnreachable:
        x5_vub = INF
        flags.add("projection_unreachable")
    x5 = min(x5_unb, x5_vub, sp.u5)
    if x5 == x5_vub and x5_vub < x5_unb:
        flags.add("voltage_bound")
    if x5 == sp.u5 and sp.u5 < x5_unb:
        flags.add("capability_bound")
    if x5 < sp.l5:
        x5 = sp.l5
        flags.add("lower_clamp")
    return Decision(x5, frozenset(flags))


def vwc_dispatch(sp: NodeSubproblem, previous: float | None = None) -> Decision:
    """Curtailment-minimising active setpoint ``min(x5_vub, u5)``, floored at 0."""
    if sp.mode is not DerMode.VWC:
        raise ValueError("vwc_dispatch needs a VWC subproblem")
    flags = set()
    try:
        x5_vub = vwc_voltage_projection(sp)
    except VoltageBoundUnreachable:
        x5_vub = INF
        flags.add("projection_unreachable")
    x5 = min(x5_vub, sp.u5)
    if x5_vub < sp.u5:
        flags.add("voltage_bound")
    if x5 < sp.l5:
        x5 = sp.l5
        flags.add("lower_clamp")
    return Decision(x5, frozenset(flags))


def dispatch(sp: NodeSubproblem, previous: float | None = None) -> Decision:
    if sp.mode is DerMode.VVC:
        return vvc_dispatch(sp, previous)
    return vwc_dispatch(sp, previous)


def approximation_residual(sp: NodeSubproblem, x5: float) -> float:
    """How much the loss-free x4 estimate in the projection affects ``x5``.

    If the voltage projection set the dispatch (or was clamped up to ``l5``)
    this is the x4 gap at the projected point. Otherwise it is the x4 gap
    only when the exact model says the voltage bound is violated at ``x5``
    (the estimate hid an active bound), and zero when both models agree the
    bound is slack.
    """
    try:
        x5_vub = vvc_voltage_projection(sp) if sp.mode is DerMode.VVC else vwc_voltage_projection(sp)
    except VoltageBoundUnreachable:
        x5_vub = INF
    at = x5_vub if x5_vub <= x5 else x5
    x4e = exact_x4(sp, at)
    if math.isnan(x4e):
        return INF
    gap = abs(x4e - approx_x4(sp, at))
    if at == x5_vub:
        return gap
    return gap if node_voltage(sp, x4e, x5) > sp.u3 else 0.0


# ---------------------------------------------------------------------------
# numeric oracle


class OracleResult(NamedTuple):
    feasible: bool
    x5: float
    x4: float


def _feasible_mask(sp: NodeSubproblem, x5: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x4 = exact_x4(sp, x5)
    x = linear_solution(sp, x4, x5)
    lo = np.asarray(sp.lower)[:, None]
    hi = np.asarray(sp.upper)[:, None]
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(x4) & np.all((x >= lo) & (x <= hi), axis=0)
    return ok, x4


def _is_feasible(sp: NodeSubproblem, x5: float) -> bool:
    return bool(_feasible_mask(sp, np.array([x5]))[0][0])


def _bisect_boundary(sp: NodeSubproblem, inside: float, outside: float, xtol: float) -> float:
    for _ in range(200):
        if abs(inside - outside) <= xtol:
            break
        mid = 0.5 * (inside + outside)
        if _is_feasible(sp, mid):
            inside = mid
        else:
            outside = mid
    return inside


def _x4_slope_sign(sp: NodeSubproblem, x5: float) -> float:
    """Sign of dx4/dx5 along the low-current branch (implicit differentiation)."""
    x4 = exact_x4(sp, x5)
    a, b = _offsets(sp, x5)
    x1, x2 = a + sp.z1 * x4, b + sp.z2 * x4
    if sp.mode is DerMode.VVC:
        f_x5 = -2.0 * x2
    else:
        f_x5 = -2.0 * x1
    f_x4 = 2.0 * (sp.z1 * x1 + sp.z2 * x2) - sp.v_up
    return -f_x5 / f_x4


def node_numeric_oracle(
    sp: NodeSubproblem,
    objective: Literal["min_x4", "max_x5"],
    n_scan: int = 2001,
    xtol: float = 1e-13,
) -> OracleResult:
    """Solve the exact reduced problem by scanning x5 over ``[l5, u5]``.

    Every scan point reconstructs x4 from the ellipse and checks all five
    boxes. Feasible runs are refined at their edges by bisection; for
    ``min_x4`` the interior minimum is located by bisection on the sign of
    the implicit slope dx4/dx5.
    """
    if objective not in ("min_x4", "max_x5"):
        raise ValueError(f"unknown objective {objective!r}")
    lo, hi = sp.l5, sp.u5
    if hi - lo <= 0:
        if _is_feasible(sp, lo):
            return OracleResult(True, lo, float(exact_x4(sp, lo)))
        return OracleResult(False, math.nan, math.nan)
    xs = np.linspace(lo, hi, n_scan)
    ok, _ = _feasible_mask(sp, xs)
    if not ok.any():
        return OracleResult(False, math.nan, math.nan)

    edges = np.flatnonzero(np.diff(np.concatenate(([False], ok, [False])).astype(int)))
    runs = []
    for start, stop in zip(edges[::2], edges[1::2] - 1):
        a = xs[start] if start == 0 else _bisect_boundary(sp, xs[start], xs[start - 1], xtol)
        b = xs[stop] if stop == n_scan - 1 else _bisect_boundary(sp, xs[stop], xs[stop + 1], xtol)
        runs.append((float(a), float(b)))

    if objective == "max_x5":
        x5 = runs[-1][1]
        return OracleResult(True, x5, float(exact_x4(sp, x5)))

    best = None
    for a, b in runs:
        if _x4_slope_sign(sp, a) >= 0:
            x5 = a
        elif _x4_slope_sign(sp, b) <= 0:
            x5 = b
        else:
            left, right = a, b
            for _ in range(200):
                if right - left <= xtol:
                    break
                mid = 0.5 * (left + right)
                if _x4_slope_sign(sp, mid) > 0:
                    right = mid
                else:
                    left = mid
            x5 = 0.5 * (left + right)
        x4 = float(exact_x4(sp, x5))
        if best is None or x4 < best.x4:
            best = OracleResult(True, x5, x4)
    return best
