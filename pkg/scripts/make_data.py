"""Regenerate the shipped feeders, scenarios and profiles in src/endico/data."""

from __future__ import annotations

import json
import math
from pathlib import Path

from endico.feeder import feeder_from_dict, write_profile_csv

DATA = Path(__file__).resolve().parents[1] / "src" / "endico" / "data"


def der(p: float, mode: str) -> dict:
    return {"rating_p": p, "rating_s": round(1.2 * p, 6), "mode": mode}


def tree(parents, r, x, loads, ders, amp=4.0, **extra) -> dict:
    buses = [{"id": "0", "parent": None}]
    lines = []
    for k, p in parents.items():
        lp, lq = loads.get(k, (0.0, 0.0))
        buses.append({"id": str(k), "parent": str(p), "load_p": lp, "load_q": lq, "der": ders.get(k)})
        lines.append({"from": str(p), "to": str(k), "r_pu": r[k], "x_pu": x[k], "ampacity_sq_pu": amp})
    return {**extra, "buses": buses, "lines": lines}


def feeder_3bus_vvc() -> dict:
    # given in ohms and amperes on a 12.47 kV / 1 MVA base
    z_base = 12.47**2 / 1.0
    doc = tree({1: 0, 2: 1}, {1: 0.02, 2: 0.02}, {1: 0.04, 2: 0.04},
               {1: (0.3, 0.15), 2: (0.3, 0.15)}, {1: der(0.25, "vvc"), 2: der(0.25, "vvc")},
               base_mva=1.0, base_kv=12.47)
    for ln in doc["lines"]:
        ln["r_ohm"] = round(ln.pop("r_pu") * z_base, 6)
        ln["x_ohm"] = round(ln.pop("x_pu") * z_base, 6)
        del ln["ampacity_sq_pu"]
        ln["ampacity_a"] = 200.0
    return doc


EIGHT = {1: 0, 2: 1, 3: 2, 4: 3, 5: 1, 6: 5, 7: 6}


def feeder_8bus_vvc() -> dict:
    r = {1: 0.01, 2: 0.015, 3: 0.02, 4: 0.015, 5: 0.02, 6: 0.015, 7: 0.02}
    x = {k: 2 * v for k, v in r.items()}
    loads = {2: (0.4, 0.15), 4: (0.3, 0.15), 7: (0.3, 0.12)}
    ders = {2: der(0.25, "vvc"), 4: der(0.15, "vvc"), 7: der(0.2, "vvc")}
    return tree(EIGHT, r, x, loads, ders)


def feeder_8bus_mixed() -> dict:
    # loads also at buses without a DER: local var compensation cannot reach them
    r = {1: 0.01, 2: 0.015, 3: 0.02, 4: 0.015, 5: 0.02, 6: 0.015, 7: 0.02}
    x = {k: 2 * v for k, v in r.items()}
    loads = {1: (0.1, 0.05), 2: (0.2, 0.1), 3: (0.1, 0.05), 4: (0.1, 0.05), 5: (0.1, 0.05), 6: (0.1, 0.05), 7: (0.2, 0.1)}
    ders = {2: der(0.25, "vvc"), 5: der(0.15, "vvc"), 7: der(0.2, "vvc")}
    return tree(EIGHT, r, x, loads, ders)


def feeder_3bus_vwc() -> dict:
    # short service branch behind a long shared line
    return tree({1: 0, 2: 1}, {1: 0.02, 2: 0.0018}, {1: 0.04, 2: 0.0036},
                {1: (0.1, 0.04), 2: (0.1, 0.04)}, {1: der(1.0, "vwc"), 2: der(1.0, "vwc")})


def feeder_8bus_vwc() -> dict:
    parents = {1: 0, 2: 1, 3: 2, 4: 3, 5: 1, 6: 2, 7: 6}
    r = {1: 0.008, 2: 0.008, 3: 0.008, 4: 0.002, 5: 0.01, 6: 0.006, 7: 0.006}
    x = {k: 2 * v for k, v in r.items()}
    loads = {4: (0.1, 0.04), 5: (0.2, 0.08), 7: (0.15, 0.06)}
    ders = {4: der(1.4, "vwc"), 5: der(0.3, "vwc"), 7: der(0.5, "vwc")}
    return tree(parents, r, x, loads, ders)


def daytime_profile(n: int) -> tuple[list[float], list[float]]:
    """Smooth morning-to-afternoon shape sampled at ``n`` intervals."""
    load, pv = [], []
    for k in range(n):
        s = k / (n - 1)
        pv.append(round(0.2 + 0.8 * math.sin(math.pi * s), 6))
        load.append(round(0.8 + 0.2 * math.cos(2 * math.pi * s) + 0.1 * math.sin(3 * math.pi * s), 6))
    return load, pv


SCENARIOS = {
    "steady_3bus_vvc": {"feeder": "feeder_3bus_vvc.json", "mode": "vvc", "horizon": 10, "alpha": 0.0},
    "steady_8bus_vvc": {"feeder": "feeder_8bus_vvc.json", "mode": "vvc", "horizon": 10, "alpha": 0.0},
    "mixed_8bus_vvc": {"feeder": "feeder_8bus_mixed.json", "mode": "vvc", "horizon": 10, "alpha": 0.0},
    "stressed_3bus_vwc": {"feeder": "feeder_3bus_vwc.json", "mode": "vwc", "horizon": 20, "alpha": 10.0, "v_root": 1.02},
    "stressed_8bus_vwc": {"feeder": "feeder_8bus_vwc.json", "mode": "vwc", "horizon": 20, "alpha": 10.0, "v_root": 1.02},
    "daytime_8bus_vvc": {
        "feeder": "feeder_8bus_vvc.json", "mode": "vvc", "horizon": 300, "alpha": 0.0,
        "profile": "profile_30.csv", "profile_interval_seconds": 60,
    },
}


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    feeders = {
        "feeder_3bus_vvc": feeder_3bus_vvc(),
        "feeder_8bus_vvc": feeder_8bus_vvc(),
        "feeder_8bus_mixed": feeder_8bus_mixed(),
        "feeder_3bus_vwc": feeder_3bus_vwc(),
        "feeder_8bus_vwc": feeder_8bus_vwc(),
    }
    for name, doc in feeders.items():
        feeder_from_dict(doc)  # validate before writing
        (DATA / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")
    load, pv = daytime_profile(30)
    write_profile_csv(DATA / "profile_30.csv", load, pv)
    for name, doc in SCENARIOS.items():
        body = {"name": name, "step_seconds": 6, "v_min": 0.95, "v_max": 1.05, **doc}
        body.setdefault("profile_interval_seconds", 6 * body["horizon"])
        (DATA / f"{name}.json").write_text(json.dumps(body, indent=2) + "\n")


if __name__ == "__main__":
    main()
