"""Convergence envelope of the smoothed exchange on a 3-bus Volt-Watt feeder.

Two VWC DERs sit on a chain; the upstream line is ``k`` times the
downstream one. For each (k, alpha) the run reports steps to converge
(``-`` when still moving within the last five steps of the horizon) and the voltage oscillation,
for the recursive and the plain smoothing.

    python scripts/alpha_sweep.py
"""

from __future__ import annotations

import argparse
from dataclasses import replace

from endico import data_path
from endico.agents import run_simulation
from endico.feeder import load_scenario
from endico.report import build_report


def feeder_with_ratio(base, k: float):
    up, down = base.lines
    down = replace(down, r=up.r / k, x=up.x / k)
    return replace(base, lines=(up, down))


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--horizon", type=int, default=40)
    ap.add_argument("--ratios", type=float, nargs="+", default=[2, 5, 8, 11, 15, 25])
    ap.add_argument("--alphas", type=float, nargs="+", default=[0, 1, 5, 10, 20, 50])
    args = ap.parse_args()

    base = load_scenario(data_path("stressed_3bus_vwc.json"))
    base = base.with_overrides(horizon=args.horizon, profile_interval_seconds=base.step_seconds * args.horizon)
    for recursive in (True, False):
        print(f"\n{'recursive' if recursive else 'plain'} smoothing: steps to converge / oscillation pu")
        print("k \\ alpha " + "".join(f"{a:>16g}" for a in args.alphas))
        for k in args.ratios:
            cells = []
            for a in args.alphas:
                sc = replace(base, feeder=feeder_with_ratio(base.feeder, k), alpha=a, recursive_fpi=recursive)
                rep = build_report(run_simulation(sc), baseline=False)
                steps = rep.max_steps_to_converge
                if steps is not None and steps > args.horizon - 5:
                    steps = None  # a repeated value at the end of a limit cycle is not convergence
                cells.append(f"{steps if steps is not None else '-':>6}/{rep.max_osc_pu:.1e}")
            print(f"{k:<10g}" + "".join(f"{c:>16}" for c in cells))


if __name__ == "__main__":
    main()
