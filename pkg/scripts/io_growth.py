#!/usr/bin/env python3
"""Host-to-device I/O per simulation step as the population grows.

Runs the sglang_like preset on the independent workload for several agent
counts with everything else fixed: 25% resident cap, 20% target active rate
and one shared cost model. Prints the load ticks per step (time requests spend
waiting for transfers, divided by the number of steps) for each n and writes
the points as CSV.

    python scripts/io_growth.py --ns 100,325,550,775,1000 --out results/io_growth.csv
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from calibrate import template, with_scale
from idmem.config import parse_config

DEFAULT_NS = (100, 325, 550, 775, 1000)


def io_growth_points(ns=DEFAULT_NS, decode: float = 4.0, steps: int = 3, preset: str = "sglang_like"):
    """``[(n, load_per_step, report)]`` for one fixed cost model across ``ns``."""
    out = []
    for n in ns:
        raw = with_scale(template("independent", n), decode)
        raw["workload"]["steps"] = steps
        raw["policy"] = {"preset": preset}
        rep = parse_config(raw).execute()
        out.append((n, rep.load_per_step, rep))
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ns", default=",".join(map(str, DEFAULT_NS)))
    p.add_argument("--decode", type=float, default=4.0, help="decode ticks per output token")
    p.add_argument("--preset", default="sglang_like")
    p.add_argument("--out", type=Path, default=None)
    args = p.parse_args(argv)
    ns = [int(x) for x in args.ns.split(",")]
    pts = io_growth_points(ns, args.decode, preset=args.preset)
    for n, load, rep in pts:
        print(f"n={n:5d} load_ticks_per_step={load:.3f} makespan={rep.makespan:.1f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["n_agents", "load_ticks_per_step", "makespan_ticks"])
            w.writerows((n, load, rep.makespan) for n, load, rep in pts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
