"""Command-line harness: ``run``, ``compare`` and ``sweep``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation.
Log verbosity comes from the ``IDMEM_LOG_LEVEL`` environment variable
(``DEBUG``, ``INFO``, ``WARNING`` (default), ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import PRESETS, ConfigError, RunConfig, load_config, override, parse_config
from .engine import CausalityError
from .memory import InvariantViolation
from .metrics import ConfigMismatch, RunReport, compare, write_csv

log = logging.getLogger("idmem")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
LOG_ENV = "IDMEM_LOG_LEVEL"
# sweep axis aliases -> dotted config key
AXES = {
    "n_agents": "workload.n_agents",
    "sparsity": "workload.target_active_rate",
    "capacity": "memory.resident_agent_cap",
}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run_id_for(cfg: RunConfig) -> str:
    """Row id; carries the config hash so every CSV row is traceable."""
    base = cfg.run_id or f"{cfg.preset}-n{cfg.workload.n_agents}-s{cfg.seed}"
    return f"{base}-{cfg.config_hash}"


def _execute(cfg: RunConfig) -> RunReport:
    log.info("running %s (config %s, workload %s)", cfg.preset, cfg.config_hash, cfg.workload_hash)
    report = cfg.execute()
    log.info("%s done: makespan=%.1f mean_ttft=%.2f", cfg.preset, report.makespan, report.mean_ttft)
    return report


def _execute_raw(raw: dict) -> dict:
    return _execute(parse_config(raw)).to_dict()


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = _execute(cfg)
    out = Path(args.out)
    _write(out, "report.json", report.to_json())
    _write(out, "runs.csv", write_csv([report.csv_row(run_id_for(cfg))]))
    print(f"{cfg.preset}: makespan={report.makespan:.3f} mean_ttft={report.mean_ttft:.3f} -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base, treat = load_config(args.baseline), load_config(args.treatment)
    if base.workload_hash != treat.workload_hash:
        raise ConfigError("workload", f"baseline and treatment workloads differ "
                                      f"({base.workload_hash} != {treat.workload_hash}); only the policy may change")
    rb, rt = _execute(base), _execute(treat)
    result = compare(rb, rt)
    result["config_hash"] = {"baseline": base.config_hash, "treatment": treat.config_hash}
    out = Path(args.out)
    _write(out, "baseline.json", rb.to_json())
    _write(out, "treatment.json", rt.to_json())
    _write(out, "comparison.json", json.dumps(result, sort_keys=True, indent=2) + "\n")
    _write(out, "runs.csv", write_csv([rb.csv_row(run_id_for(base)), rt.csv_row(run_id_for(treat))]))
    print(f"speedup {result['speedup']:.3f}, mean TTFT reduction {result['ttft_reduction_pct']:.1f}% -> {out}")
    return EXIT_OK


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def sweep_configs(raw: dict, axis: str, values: list, presets: list) -> list[tuple[int, object, RunConfig]]:
    """One config per (value, preset); value index ``i`` runs with seed ``base_seed + i``."""
    key = AXES.get(axis, axis)
    if "." not in key:
        raise ConfigError("axis", f"unknown axis {axis!r} (expected {', '.join(AXES)} or section.key)")
    base_seed = parse_config(raw).seed
    out = []
    for i, value in enumerate(values):
        point = override(raw, key, value)
        point = override(point, "run.seed", base_seed + i)
        if key == "memory.resident_agent_cap":
            point["memory"].pop("device_capacity", None)
        cfgs = []
        for preset in presets:
            p = override(point, "policy", {k: v for k, v in point.get("policy", {}).items()
                                           if k not in ("preset", "eviction", "prefetch", "prefix_backing")})
            p["policy"]["preset"] = preset
            try:
                cfgs.append(parse_config(p))
            except ConfigError as exc:
                raise ConfigError(f"{key}={value}: {exc.field}", str(exc).split(": ", 1)[-1]) from None
        hashes = {c.workload_hash for c in cfgs}
        if len(hashes) != 1:
            raise ConfigError("workload", f"presets at {key}={value} disagree on the workload hash")
        out.extend((i, value, c) for c in cfgs)
    return out


def cmd_sweep(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if Path(args.config).is_file() else None
    if raw is None:
        raise ConfigError(args.config, "file not found")
    load_config(args.config)  # validates the base config
    values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("values", "empty value list")
    presets = [p.strip() for p in args.presets.split(",")] if args.presets else list(PRESETS)
    for p in presets:
        if p not in PRESETS:
            raise ConfigError("presets", f"unknown preset {p!r}")
    points = sweep_configs(raw, args.axis, values, presets)
    raws = [c.raw for _, _, c in points]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = [RunReport.from_dict(d) for d in pool.map(_execute_raw, raws)]
    else:
        reports = [_execute(c) for _, _, c in points]
    rows, summary = [], []
    for (i, value, cfg), rep in zip(points, reports):
        rows.append(rep.csv_row(run_id_for(cfg)))
        summary.append({"index": i, "axis": args.axis, "value": value, "preset": cfg.preset, "seed": cfg.seed,
                        "config_hash": cfg.config_hash, "workload_hash": cfg.workload_hash,
                        "makespan": rep.makespan, "mean_ttft": rep.mean_ttft, "load_per_step": rep.load_per_step,
                        "load_share": rep.load_share})
    out = Path(args.out)
    _write(out, "sweep.csv", write_csv(rows))
    _write(out, "sweep.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"{len(rows)} runs -> {out / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idmem", description="Distance-guided agent memory simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", help="run two configs that differ only in policy")
    p.add_argument("--baseline", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("sweep", help="run every preset over a list of axis values")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, help=f"{', '.join(AXES)} or a dotted config key")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--presets", default="", help="comma-separated presets (default: all)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, CausalityError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
