"""Radial feeder and scenario data model.

All electrical quantities are stored per-unit on the single system base
declared in the feeder file. Ohm/ampere inputs are converted at ingestion.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np


class FeederError(ValueError):
    """Raised when a feeder or scenario fails validation."""


class DerMode(str, Enum):
    VVC = "vvc"
    VWC = "vwc"

    @classmethod
    def parse(cls, value: str | DerMode) -> DerMode:
        try:
            return cls(str(value.value if isinstance(value, DerMode) else value).lower())
        except ValueError:
            raise FeederError(f"unknown DER mode {value!r}; expected 'vvc' or 'vwc'") from None


@dataclass(frozen=True)
class DerSpec:
    """Smart-inverter PV unit.

    ``rating_s`` is the apparent-power capability; ``rating_p`` the rated
    active power. Available active power at a step is ``rating_p * pv_mult``.
    """

    rating_s: float
    rating_p: float
    mode: DerMode = DerMode.VVC

    def p_available(self, pv_mult: float) -> float:
        return self.rating_p * pv_mult


@dataclass(frozen=True)
class Bus:
    id: str
    parent: str | None
    children: tuple[str, ...] = ()
    load_p: float = 0.0
    load_q: float = 0.0
    der: DerSpec | None = None


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float
    ampacity_sq: float

    @property
    def z_sq(self) -> float:
        return self.r * self.r + self.x * self.x


@dataclass(frozen=True)
class Feeder:
    """Immutable radial network. Lines are keyed by their receiving bus."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 1.0
    base_kv: float = 1.0

    def __post_init__(self) -> None:
        _validate(self)

    @cached_property
    def bus_map(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def line_map(self) -> dict[str, Line]:
        return {ln.to_bus: ln for ln in self.lines}

    @cached_property
    def root(self) -> str:
        return next(b.id for b in self.buses if b.parent is None)

    @cached_property
    def order(self) -> tuple[str, ...]:
        return tuple(topology_order(self))

    @cached_property
    def index(self) -> dict[str, int]:
        return {b: i for i, b in enumerate(self.order)}

    @cached_property
    def der_buses(self) -> tuple[str, ...]:
        return tuple(b for b in self.order if self.bus_map[b].der is not None)

    def bus(self, bus_id: str) -> Bus:
        return self.bus_map[bus_id]

    def line_to(self, bus_id: str) -> Line:
        return self.line_map[bus_id]

    def with_mode(self, mode: DerMode | str) -> Feeder:
        """Copy of the feeder with every DER switched to ``mode`` (revalidated)."""
        mode = DerMode.parse(mode)
        buses = tuple(
            replace(b, der=replace(b.der, mode=mode)) if b.der is not None else b
            for b in self.buses
        )
        return replace(self, buses=buses)

    @cached_property
    def arrays(self) -> FeederArrays:
        return FeederArrays.build(self)


@dataclass(frozen=True, eq=False)
class FeederArrays:
    """Dense per-bus arrays in topological order (root at index 0).

    Line quantities are indexed by receiving bus; the root slot is zero.
    ``subtree[i, j] == 1`` when bus j lies in the subtree rooted at bus i.
    """

    ids: tuple[str, ...]
    parent: np.ndarray
    r: np.ndarray
    x: np.ndarray
    ampacity_sq: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    subtree: np.ndarray

    @classmethod
    def build(cls, feeder: Feeder) -> FeederArrays:
        ids = feeder.order
        idx = feeder.index
        n = len(ids)
        parent = np.full(n, -1, dtype=int)
        r = np.zeros(n)
        x = np.zeros(n)
        amp = np.full(n, np.inf)
        load_p = np.zeros(n)
        load_q = np.zeros(n)
        for k, b in enumerate(ids):
            bus = feeder.bus_map[b]
            load_p[k] = bus.load_p
            load_q[k] = bus.load_q
            if bus.parent is not None:
                ln = feeder.line_map[b]
                parent[k] = idx[bus.parent]
                r[k], x[k], amp[k] = ln.r, ln.x, ln.ampacity_sq
        subtree = np.eye(n)
        # reverse topological order: children are complete before parents
        for k in range(n - 1, 0, -1):
            subtree[parent[k]] += subtree[k]
        return cls(ids, parent, r, x, amp, load_p, load_q, subtree)


def topology_order(feeder: Feeder) -> list[str]:
    """Buses in breadth-first root-to-leaf order; parents precede children."""
    bus_map = {b.id: b for b in feeder.buses}
    root = next(b.id for b in feeder.buses if b.parent is None)
    out = [root]
    k = 0
    while k < len(out):
        out.extend(bus_map[out[k]].children)
        k += 1
    return out


def _validate(feeder: Feeder) -> None:
    ids = [b.id for b in feeder.buses]
    seen: set[str] = set()
    for b in ids:
        if b in seen:
            raise FeederError(f"duplicate bus id {b!r}")
        seen.add(b)
    roots = [b.id for b in feeder.buses if b.parent is None]
    if len(roots) != 1:
        if not roots:
            raise FeederError("cycle detected: no root bus (every bus has a parent)")
        raise FeederError(f"feeder must have exactly one root bus, found {roots}")
    bus_map = {b.id: b for b in feeder.buses}
    for b in feeder.buses:
        if b.parent is not None and b.parent not in bus_map:
            raise FeederError(f"orphan bus {b.id!r}: parent {b.parent!r} does not exist")
        expected = tuple(c.id for c in feeder.buses if c.parent == b.id)
        if tuple(b.children) != expected:
            raise FeederError(
                f"bus {b.id!r}: children {list(b.children)} inconsistent with parent references {list(expected)}"
            )

    # union-find over lines catches cycles independently of the parent fields
    uf = {b: b for b in ids}

    def find(a: str) -> str:
        while uf[a] != a:
            uf[a] = uf[uf[a]]
            a = uf[a]
        return a

    to_seen: set[str] = set()
    for ln in feeder.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in bus_map:
                raise FeederError(f"line {ln.from_bus}->{ln.to_bus}: unknown bus {end!r}")
        ra, rb = find(ln.from_bus), find(ln.to_bus)
        if ra == rb:
            raise FeederError(f"cycle detected: line {ln.from_bus}->{ln.to_bus}")
        uf[ra] = rb
        if ln.to_bus in to_seen:
            raise FeederError(f"bus {ln.to_bus!r} is fed by more than one line")
        to_seen.add(ln.to_bus)
        if bus_map[ln.to_bus].parent != ln.from_bus:
            raise FeederError(
                f"line {ln.from_bus}->{ln.to_bus} does not match parent of {ln.to_bus!r} "
                f"({bus_map[ln.to_bus].parent!r})"
            )
        if not (ln.r >= 0 and ln.x >= 0 and ln.r + ln.x > 0):
            raise FeederError(f"line {ln.from_bus}->{ln.to_bus}: nonpositive impedance r={ln.r}, x={ln.x}")
        if not ln.ampacity_sq > 0:
            raise FeederError(f"line {ln.from_bus}->{ln.to_bus}: ampacity must be positive")

    # parent cycles not touching the root leave buses unreachable
    reachable = set(topology_order(feeder))
    if len(reachable) != len(ids):
        stray = sorted(set(ids) - reachable)
        raise FeederError(f"cycle detected among buses {stray}")
    for b in feeder.buses:
        if b.parent is not None and b.id not in to_seen:
            raise FeederError(f"bus {b.id!r} has no line from its parent {b.parent!r}")

    for b in feeder.buses:
        der = b.der
        if der is None:
            continue
        if b.parent is None:
            raise FeederError(f"DER at root bus {b.id!r} is not supported (root is the slack)")
        if not der.rating_s > 0 or not der.rating_p > 0:
            raise FeederError(f"DER at bus {b.id!r}: ratings must be positive")
        if der.rating_p > der.rating_s:
            raise FeederError(f"DER at bus {b.id!r}: rating_p {der.rating_p} exceeds rating_s {der.rating_s}")
        ln = next(ln for ln in feeder.lines if ln.to_bus == b.id)
        if der.mode is DerMode.VVC and ln.x <= 0:
            raise FeederError(f"VVC DER at bus {b.id!r} needs a line with x > 0 (voltage projection divides by x)")
        if der.mode is DerMode.VWC and ln.r <= 0:
            raise FeederError(f"VWC DER at bus {b.id!r} needs a line with r > 0 (voltage projection divides by r)")


# ---------------------------------------------------------------------------
# file ingestion


def _number(obj: Mapping[str, Any], key: str, where: str) -> float:
    try:
        value = float(obj[key])
    except (TypeError, ValueError):
        raise FeederError(f"{where}: field {key!r} is not a number") from None
    if not math.isfinite(value):
        raise FeederError(f"{where}: field {key!r} is not finite")
    return value


def feeder_from_dict(doc: Mapping[str, Any]) -> Feeder:
    """Build a validated feeder from the JSON document layout."""
    if not isinstance(doc, Mapping) or "buses" not in doc or "lines" not in doc:
        raise FeederError("feeder document needs 'buses' and 'lines'")
    base_mva = _number(doc, "base_mva", "feeder") if "base_mva" in doc else 1.0
    base_kv = _number(doc, "base_kv", "feeder") if "base_kv" in doc else 1.0
    if base_mva <= 0 or base_kv <= 0:
        raise FeederError("feeder: base_mva and base_kv must be positive")
    z_base = base_kv**2 / base_mva
    i_base = base_mva * 1e3 / (math.sqrt(3.0) * base_kv)

    raw_buses = []
    for k, rb in enumerate(doc["buses"]):
        if "id" not in rb:
            raise FeederError(f"bus #{k}: missing 'id'")
        bid = str(rb["id"])
        parent = rb.get("parent")
        der = None
        if rb.get("der") is not None:
            d = rb["der"]
            der = DerSpec(
                rating_s=_number(d, "rating_s", f"bus {bid!r} der"),
                rating_p=_number(d, "rating_p", f"bus {bid!r} der"),
                mode=DerMode.parse(d.get("mode", "vvc")),
            )
        raw_buses.append(
            dict(
                id=bid,
                parent=None if parent is None else str(parent),
                load_p=_number(rb, "load_p", f"bus {bid!r}") if "load_p" in rb else 0.0,
                load_q=_number(rb, "load_q", f"bus {bid!r}") if "load_q" in rb else 0.0,
                der=der,
            )
        )
    buses = tuple(
        Bus(children=tuple(c["id"] for c in raw_buses if c["parent"] == b["id"]), **b) for b in raw_buses
    )

    lines = []
    for k, rl in enumerate(doc["lines"]):
        where = f"line #{k} ({rl.get('from')}->{rl.get('to')})"
        if "from" not in rl or "to" not in rl:
            raise FeederError(f"{where}: missing 'from'/'to'")
        if "r_pu" in rl:
            r = _number(rl, "r_pu", where)
        elif "r_ohm" in rl:
            r = _number(rl, "r_ohm", where) / z_base
        else:
            raise FeederError(f"{where}: missing r_pu or r_ohm")
        if "x_pu" in rl:
            x = _number(rl, "x_pu", where)
        elif "x_ohm" in rl:
            x = _number(rl, "x_ohm", where) / z_base
        else:
            raise FeederError(f"{where}: missing x_pu or x_ohm")
        if "ampacity_sq_pu" in rl:
            amp = _number(rl, "ampacity_sq_pu", where)
        elif "ampacity_a" in rl:
            amp = (_number(rl, "ampacity_a", where) / i_base) ** 2
        else:
            amp = math.inf  # unrated line
        lines.append(Line(str(rl["from"]), str(rl["to"]), r, x, amp))
    return Feeder(buses, tuple(lines), base_mva, base_kv)


def feeder_to_dict(feeder: Feeder) -> dict[str, Any]:
    """Serialize to the feeder JSON layout using per-unit fields."""
    return {
        "base_mva": feeder.base_mva,
        "base_kv": feeder.base_kv,
        "buses": [
            {
                "id": b.id,
                "parent": b.parent,
                "load_p": b.load_p,
                "load_q": b.load_q,
                "der": None
                if b.der is None
                else {"rating_p": b.der.rating_p, "rating_s": b.der.rating_s, "mode": b.der.mode.value},
            }
            for b in feeder.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r_pu": ln.r, "x_pu": ln.x}
            | ({"ampacity_sq_pu": ln.ampacity_sq} if math.isfinite(ln.ampacity_sq) else {})
            for ln in feeder.lines
        ],
    }


def load_feeder(path: str | Path) -> Feeder:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: malformed JSON ({exc})") from None
    return feeder_from_dict(doc)


def save_feeder(feeder: Feeder, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(feeder), indent=2) + "\n")


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class StepInputs:
    """Everything exogenous at one controller step."""

    load_mult: float
    pv_mult: float
    v_root_sq: float
    v_min_sq: float
    v_max_sq: float


@dataclass(frozen=True)
class Scenario:
    feeder: Feeder
    horizon: int
    mode: DerMode = DerMode.VVC
    step_seconds: float = 6.0
    profile_interval_seconds: float = 60.0
    load_profile: tuple[float, ...] = (1.0,)
    pv_profile: tuple[float, ...] = (1.0,)
    v_min_sq: float = 0.95**2
    v_max_sq: float = 1.05**2
    alpha: float = 0.0
    v_root_sq: float = 1.0
    smooth_voltage: bool = True
    smooth_flows: bool = True
    recursive_fpi: bool = True
    name: str = field(default="scenario", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", DerMode.parse(self.mode))
        object.__setattr__(self, "load_profile", tuple(float(v) for v in self.load_profile))
        object.__setattr__(self, "pv_profile", tuple(float(v) for v in self.pv_profile))
        if self.horizon < 1:
            raise FeederError("scenario: horizon must be >= 1")
        if not 0 < self.v_min_sq < self.v_max_sq:
            raise FeederError("scenario: need 0 < v_min_sq < v_max_sq")
        if self.v_root_sq <= 0:
            raise FeederError("scenario: v_root_sq must be positive")
        if self.alpha < 0:
            raise FeederError("scenario: alpha must be >= 0")
        if self.step_seconds <= 0 or self.profile_interval_seconds <= 0:
            raise FeederError("scenario: time resolutions must be positive")
        ratio = self.profile_interval_seconds / self.step_seconds
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise FeederError("scenario: profile interval must be a whole multiple of the controller step")
        if len(self.load_profile) != len(self.pv_profile):
            raise FeederError("scenario: load and pv profiles differ in length")
        if len(self.load_profile) < self.n_intervals:
            raise FeederError(
                f"scenario: profile has {len(self.load_profile)} intervals, horizon needs {self.n_intervals}"
            )
        if min(self.load_profile + self.pv_profile) < 0:
            raise FeederError("scenario: profile multipliers must be >= 0")
        for b in self.feeder.der_buses:
            if self.feeder.bus(b).der.mode is not self.mode:
                raise FeederError(f"scenario mode {self.mode.value} but DER at {b!r} is {self.feeder.bus(b).der.mode.value}")

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.profile_interval_seconds / self.step_seconds))

    @property
    def n_intervals(self) -> int:
        return -(-self.horizon // self.steps_per_interval)

    def interval(self, step: int) -> int:
        return step // self.steps_per_interval

    def inputs(self, step: int) -> StepInputs:
        k = self.interval(step)
        return StepInputs(self.load_profile[k], self.pv_profile[k], self.v_root_sq, self.v_min_sq, self.v_max_sq)

    def with_overrides(self, **kw: Any) -> Scenario:
        if "mode" in kw and kw["mode"] is not None:
            mode = DerMode.parse(kw["mode"])
            kw["mode"] = mode
            kw.setdefault("feeder", self.feeder.with_mode(mode))
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def load_profile_csv(path: str | Path) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Read ``step,load_mult,pv_mult`` rows; steps must be 0..n-1 in order."""
    loads, pvs = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["step", "load_mult", "pv_mult"]:
            raise FeederError(f"{path}: header must be 'step,load_mult,pv_mult'")
        for k, row in enumerate(reader):
            try:
                step = int(row["step"])
                loads.append(float(row["load_mult"]))
                pvs.append(float(row["pv_mult"]))
            except (TypeError, ValueError):
                raise FeederError(f"{path}: row {k + 1} is malformed") from None
            if step != k:
                raise FeederError(f"{path}: row {k + 1} has step {step}, expected {k}")
    if not loads:
        raise FeederError(f"{path}: profile is empty")
    return tuple(loads), tuple(pvs)


def write_profile_csv(path: str | Path, load: Iterable[float], pv: Iterable[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "load_mult", "pv_mult"])
        for k, (lm, pm) in enumerate(zip(load, pv)):
            w.writerow([k, repr(float(lm)), repr(float(pm))])


def _squared(doc: Mapping[str, Any], name: str, default: float) -> float:
    if f"{name}_sq" in doc:
        return _number(doc, f"{name}_sq", "scenario")
    if name in doc:
        return _number(doc, name, "scenario") ** 2
    return default


def load_scenario(path: str | Path, **overrides: Any) -> Scenario:
    """Load a scenario JSON document.

    Paths to the feeder and profile are resolved relative to the scenario
    file. Voltages may be given as magnitudes (``v_min``) or squared
    (``v_min_sq``).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: malformed JSON ({exc})") from None
    base = path.parent
    fdoc = doc.get("feeder")
    if isinstance(fdoc, str):
        feeder = load_feeder(base / fdoc)
    elif isinstance(fdoc, Mapping):
        feeder = feeder_from_dict(fdoc)
    else:
        raise FeederError(f"{path}: 'feeder' must be a path or an inline document")
    mode = DerMode.parse(overrides.pop("mode", None) or doc.get("mode", "vvc"))
    feeder = feeder.with_mode(mode)

    prof = doc.get("profile")
    if isinstance(prof, str):
        load_prof, pv_prof = load_profile_csv(base / prof)
    elif isinstance(prof, Mapping):
        load_prof, pv_prof = tuple(prof["load_mult"]), tuple(prof["pv_mult"])
    else:
        load_prof, pv_prof = (1.0,), (1.0,)

    horizon = int(doc.get("horizon", 10))
    step_seconds = float(doc.get("step_seconds", 6.0))
    interval_seconds = float(doc.get("profile_interval_seconds", 60.0))
    if prof is None:
        n = -(-horizon // max(1, int(round(interval_seconds / step_seconds))))
        load_prof, pv_prof = load_prof * n, pv_prof * n
    fpi = doc.get("fpi", {})
    kw: dict[str, Any] = dict(
        feeder=feeder,
        horizon=horizon,
        mode=mode,
        step_seconds=step_seconds,
        profile_interval_seconds=interval_seconds,
        load_profile=load_prof,
        pv_profile=pv_prof,
        v_min_sq=_squared(doc, "v_min", 0.95**2),
        v_max_sq=_squared(doc, "v_max", 1.05**2),
        alpha=float(doc.get("alpha", 0.0)),
        v_root_sq=_squared(doc, "v_root", 1.0),
        smooth_voltage=bool(fpi.get("voltage", True)),
        smooth_flows=bool(fpi.get("flows", True)),
        recursive_fpi=bool(fpi.get("recursive", True)),
        name=str(doc.get("name", path.stem)),
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return Scenario(**kw)
