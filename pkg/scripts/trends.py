#!/usr/bin/env python3
"""Speedup and TTFT trends on the calibrated configs.

Runs every preset on each calibrated config over several seeds and prints,
per config and seed, the hicache_like transfer share, scalesim's makespan
speedup over sglang_like and the scalesim / hicache_like mean TTFT ratio.
Results are also written as CSV (one row per run) next to a JSON summary.

    python scripts/trends.py --seeds 0,1,2 --out results/trends
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from idmem.cli import run_id_for
from idmem.config import PRESETS, override, parse_config
from idmem.metrics import write_csv

ROOT = Path(__file__).resolve().parent.parent
CALIBRATED = ROOT / "configs" / "calibrated"


def run_point(args):
    path, seed, preset = args
    raw = json.loads(Path(path).read_text())
    raw = override(raw, "run.seed", seed)
    raw["policy"] = dict(raw["policy"], preset=preset)
    cfg = parse_config(raw)
    rep = cfg.execute()
    return path, seed, preset, rep.to_dict(), rep.csv_row(run_id_for(cfg)), rep.transfer_share


def evaluate(paths, seeds, jobs=1):
    """Run all presets for every (config, seed); returns ``{(path, seed): {preset: (report_dict, row, share)}}``."""
    points = [(str(p), s, preset) for p in paths for s in seeds for preset in PRESETS]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(run_point, points))
    else:
        results = [run_point(p) for p in points]
    out = {}
    for path, seed, preset, rep, row, share in results:
        out.setdefault((path, seed), {})[preset] = (rep, row, share)
    return out


def summarize(results) -> list[dict]:
    rows = []
    for (path, seed), by in sorted(results.items()):
        sg, hc, ss = (by[p][0] for p in ("sglang_like", "hicache_like", "scalesim"))
        rows.append({
            "config": Path(path).stem, "seed": seed,
            "hicache_transfer_share": by["hicache_like"][2],
            "speedup_vs_sglang": sg["makespan"] / ss["makespan"],
            "speedup_vs_hicache": hc["makespan"] / ss["makespan"],
            "ttft_ratio_vs_hicache": ss["mean_ttft"] / hc["mean_ttft"] if hc["mean_ttft"] else float("nan"),
        })
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--configs", nargs="*", type=Path, default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, default=ROOT / "results" / "trends")
    args = p.parse_args(argv)
    paths = args.configs or sorted(CALIBRATED.glob("*.json"))
    if not paths:
        print("no calibrated configs; run scripts/calibrate.py first", file=sys.stderr)
        return 1
    seeds = [int(s) for s in args.seeds.split(",")]
    results = evaluate(paths, seeds, args.jobs)
    summary = summarize(results)
    for r in summary:
        print(f"{r['config']:18s} seed={r['seed']} hicache_share={r['hicache_transfer_share']:.3f} "
              f"speedup={r['speedup_vs_sglang']:.3f} (vs hicache {r['speedup_vs_hicache']:.3f}) "
              f"ttft_ratio={r['ttft_ratio_vs_hicache']:.3f}")
    args.out.mkdir(parents=True, exist_ok=True)
    rows = [by[preset][1] for _, by in sorted(results.items()) for preset in PRESETS]
    (args.out / "runs.csv").write_text(write_csv(rows))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
