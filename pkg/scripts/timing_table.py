"""Median per-node solve time, closed form vs numeric oracle, on every shipped scenario.

    python scripts/timing_table.py [--scan 2001]
"""

from __future__ import annotations

import argparse
import statistics

from endico import data_path
from endico.agents import run_simulation
from endico.feeder import load_scenario

SCENARIOS = ("steady_3bus_vvc", "steady_8bus_vvc", "mixed_8bus_vvc", "stressed_3bus_vwc", "stressed_8bus_vwc")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--scan", type=int, default=2001, help="oracle scan resolution")
    args = ap.parse_args()

    print(f"{'scenario':<20} {'solves':>6} {'closed us':>10} {'oracle us':>10} {'ratio':>7}")
    for name in SCENARIOS:
        sc = load_scenario(data_path(f"{name}.json"))
        trace = run_simulation(sc, timing=True, oracle_scan=args.scan)
        cf = statistics.median(t.closed_form_s for t in trace.timings) * 1e6
        orc = statistics.median(t.oracle_s for t in trace.timings) * 1e6
        print(f"{name:<20} {len(trace.timings):>6} {cf:>10.2f} {orc:>10.1f} {orc / cf:>6.0f}x")


if __name__ == "__main__":
    main()
