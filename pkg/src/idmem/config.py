"""Run configuration: JSON schema, validation, preset expansion and hashing.

A config file is a JSON object with five sections::

    {
      "workload": {"category": "independent", "n_agents": 100, ...},
      "cost":     {"prefill_per_token": 0.02, "decode_per_token": 0.3, ...},
      "memory":   {"resident_agent_cap": 0.25} | {"device_capacity": 8589934592},
      "policy":   {"preset": "scalesim"} | {"eviction": "lru", "prefetch": "none", "prefix_backing": "host"},
      "run":      {"seed": 0, "horizon": null}
    }

``run.seed`` is required. See README.md for every key.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

from .engine import CostModel, as_time
from .policy import EvictionKind, EvictionPolicy, PrefetchKind, PrefetchPolicy
from .simulator import MemoryConfig, Simulator
from .workload import WorkloadConfig, generate

PRESETS = {
    "sglang_like": {"eviction": "lru", "prefetch": "none", "prefix_backing": "none"},
    "hicache_like": {"eviction": "lru", "prefetch": "none", "prefix_backing": "host"},
    "scalesim": {"eviction": "distance", "prefetch": "distance", "prefix_backing": "host"},
}
SECTIONS = ("workload", "cost", "memory", "policy", "run")
_WORKLOAD_FIELDS = {f.name for f in dataclasses.fields(WorkloadConfig)} - {"seed"}
_COST_FIELDS = {f.name for f in dataclasses.fields(CostModel)}
_MEMORY_FIELDS = {"device_capacity", "resident_agent_cap", "adapter_bytes", "bytes_per_token"}
_POLICY_FIELDS = {"preset", "eviction", "prefetch", "prefix_backing", "threshold", "poll_period", "budget"}
_RUN_FIELDS = {"seed", "horizon", "run_id", "check_invariants"}
_SECTION_FIELDS = dict(zip(SECTIONS, (_WORKLOAD_FIELDS, _COST_FIELDS, _MEMORY_FIELDS, _POLICY_FIELDS, _RUN_FIELDS)))


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _num(x):
    """JSON-friendly exact number: ints stay ints, other rationals become floats."""
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    return x


@dataclass
class RunConfig:
    workload: WorkloadConfig
    cost: CostModel
    device_capacity: int
    eviction: EvictionKind
    prefetch: PrefetchKind
    prefix_backing: bool
    threshold: Any
    poll_period: Fraction
    seed: int
    preset: str = "custom"
    budget: Optional[int] = None
    horizon: Optional[Fraction] = None
    adapter_bytes: int = 32 * 2**20
    bytes_per_token: int = 64 * 1024
    resident_agent_cap: Optional[float] = None
    run_id: str = ""
    check_invariants: bool = False
    raw: dict = field(default_factory=dict)

    # -- hashing ----------------------------------------------------------------
    def normalized(self) -> dict:
        """Fully expanded config (presets resolved, defaults filled) as plain JSON."""
        wl = {k: v for k, v in dataclasses.asdict(self.workload).items() if k != "seed"}
        wl = json.loads(json.dumps(wl))
        cost = {f: _num(getattr(self.cost, f)) for f in sorted(_COST_FIELDS)}
        return {
            "workload": wl,
            "cost": cost,
            "memory": {"device_capacity": self.device_capacity, "resident_agent_cap": self.resident_agent_cap,
                       "adapter_bytes": self.adapter_bytes, "bytes_per_token": self.bytes_per_token},
            "policy": {"preset": self.preset, "eviction": self.eviction.value, "prefetch": self.prefetch.value,
                       "prefix_backing": "host" if self.prefix_backing else "none",
                       "threshold": None if self.threshold == math.inf else _num(self.threshold),
                       "poll_period": _num(self.poll_period), "budget": self.budget},
            "run": {"seed": self.seed, "horizon": None if self.horizon is None else _num(self.horizon)},
        }

    @property
    def config_hash(self) -> str:
        return _digest(self.normalized())

    @property
    def workload_hash(self) -> str:
        """Hash of everything except the policy: two runs are comparable iff these match."""
        n = self.normalized()
        return _digest({"workload": n["workload"], "cost": n["cost"], "memory": n["memory"], "seed": self.seed})

    # -- execution --------------------------------------------------------------
    def build(self, check_invariants: Optional[bool] = None) -> Simulator:
        world = generate(self.workload, self.cost)
        mem = MemoryConfig(self.device_capacity, self.adapter_bytes, self.bytes_per_token, self.prefix_backing)
        meta = {"config_hash": self.config_hash, "workload_hash": self.workload_hash, "preset": self.preset,
                "config": self.normalized()}
        check = self.check_invariants if check_invariants is None else check_invariants
        return Simulator(world, self.cost, mem, EvictionPolicy(self.eviction),
                         PrefetchPolicy(self.prefetch, self.threshold, self.poll_period, self.budget),
                         record_trace=False, check_invariants=check, meta=meta)

    def execute(self, check_invariants: Optional[bool] = None):
        return self.build(check_invariants).run_until(self.horizon)

    def with_preset(self, preset: str) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["policy"] = {k: v for k, v in raw.get("policy", {}).items()
                         if k not in ("preset", "eviction", "prefetch", "prefix_backing")}
        raw["policy"]["preset"] = preset
        return parse_config(raw)


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def agent_footprint(workload: WorkloadConfig, adapter_bytes: int, bytes_per_token: int) -> int:
    return adapter_bytes + (workload.shared_prefix_tokens + workload.private_prefix_tokens) * bytes_per_token


def default_threshold(workload: WorkloadConfig, cost: CostModel, adapter_bytes: int, bytes_per_token: int):
    """Two hops for diffusion, otherwise twice the transfer time of one agent's footprint."""
    if workload.category == "diffusion":
        return 2
    return 2 * cost.transfer_time(agent_footprint(workload, adapter_bytes, bytes_per_token))


def default_poll_period(workload: WorkloadConfig) -> Fraction:
    return as_time(max(1, workload.step_length // 2))


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(path, msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a config mapping; raises :class:`ConfigError` naming the bad field."""
    _expect(isinstance(raw, dict), "<root>", "config must be a JSON object")
    for key in raw:
        _expect(key in SECTIONS, key, f"unknown section (expected one of {', '.join(SECTIONS)})")
    sec = {}
    for name in SECTIONS:
        s = raw.get(name, {})
        _expect(isinstance(s, dict), name, "section must be an object")
        for key in s:
            _expect(key in _SECTION_FIELDS[name], f"{name}.{key}", "unknown key")
        sec[name] = s

    run = sec["run"]
    _expect("seed" in run, "run.seed", "missing (a seed is required)")
    seed = run["seed"]
    _expect(_is_int(seed) and seed >= 0, "run.seed", "must be a non-negative integer")
    horizon = run.get("horizon")
    if horizon is not None:
        _expect(_is_num(horizon) and horizon > 0, "run.horizon", "must be a positive number of ticks")
        horizon = as_time(horizon)

    wl = dict(sec["workload"])
    _expect("n_agents" in wl, "workload.n_agents", "missing")
    _expect(_is_int(wl["n_agents"]) and wl["n_agents"] >= 1, "workload.n_agents", "must be an integer >= 1")
    if wl.get("graph_path") and base_dir is not None and not Path(wl["graph_path"]).is_absolute():
        wl["graph_path"] = str(base_dir / wl["graph_path"])
    if wl.get("graph_path"):
        _expect(Path(wl["graph_path"]).is_file(), "workload.graph_path", f"no such file {wl['graph_path']}")
    try:
        workload = WorkloadConfig(seed=seed, **wl)
    except (TypeError, ValueError) as exc:
        raise ConfigError("workload", str(exc)) from None

    try:
        cost = CostModel(**sec["cost"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("cost", str(exc)) from None

    mem = sec["memory"]
    adapter_bytes = mem.get("adapter_bytes", 32 * 2**20)
    bytes_per_token = mem.get("bytes_per_token", 64 * 1024)
    _expect(_is_int(adapter_bytes) and adapter_bytes > 0, "memory.adapter_bytes", "must be a positive integer")
    _expect(_is_int(bytes_per_token) and bytes_per_token > 0, "memory.bytes_per_token", "must be a positive integer")
    has_cap, has_bytes = "resident_agent_cap" in mem, "device_capacity" in mem
    _expect(has_cap != has_bytes, "memory", "give exactly one of device_capacity / resident_agent_cap")
    footprint = agent_footprint(workload, adapter_bytes, bytes_per_token)
    cap = None
    if has_cap:
        cap = mem["resident_agent_cap"]
        _expect(_is_num(cap) and 0 < cap <= 1, "memory.resident_agent_cap", "must be in (0, 1]")
        capacity = max(1, math.ceil(cap * workload.n_agents)) * footprint
    else:
        capacity = mem["device_capacity"]
        _expect(_is_int(capacity) and capacity > 0, "memory.device_capacity", "must be a positive integer")
        _expect(capacity >= footprint, "memory.device_capacity",
                f"{capacity} bytes cannot hold one agent's footprint ({footprint} bytes)")

    pol = dict(sec["policy"])
    preset = pol.pop("preset", None)
    if preset is not None:
        _expect(preset in PRESETS, "policy.preset", f"unknown preset {preset!r} (expected one of {', '.join(PRESETS)})")
        for key, value in PRESETS[preset].items():
            _expect(pol.get(key, value) == value, f"policy.{key}", f"conflicts with preset {preset!r}")
            pol[key] = value
    else:
        preset = "custom"
        for key in ("eviction", "prefetch", "prefix_backing"):
            _expect(key in pol, f"policy.{key}", "missing (or give a preset)")
    try:
        eviction = EvictionKind(pol["eviction"])
    except ValueError:
        raise ConfigError("policy.eviction", "must be 'lru' or 'distance'") from None
    try:
        prefetch = PrefetchKind(pol["prefetch"])
    except ValueError:
        raise ConfigError("policy.prefetch", "must be 'none' or 'distance'") from None
    _expect(pol["prefix_backing"] in ("none", "host"), "policy.prefix_backing", "must be 'none' or 'host'")
    threshold = pol.get("threshold")
    if threshold is None:
        threshold = default_threshold(workload, cost, adapter_bytes, bytes_per_token)
    else:
        _expect(_is_num(threshold) and threshold >= 0, "policy.threshold", "must be a number >= 0")
        threshold = as_time(threshold)
    poll = pol.get("poll_period")
    if poll is None:
        poll = default_poll_period(workload)
    else:
        _expect(_is_num(poll) and poll > 0, "policy.poll_period", "must be a positive number of ticks")
        poll = as_time(poll)
    budget = pol.get("budget")
    _expect(budget is None or (_is_int(budget) and budget > 0), "policy.budget", "must be a positive integer")
    check = run.get("check_invariants", False)
    _expect(isinstance(check, bool), "run.check_invariants", "must be true or false")
    run_id = run.get("run_id", "")
    _expect(isinstance(run_id, str), "run.run_id", "must be a string")

    return RunConfig(workload=workload, cost=cost, device_capacity=capacity, eviction=eviction, prefetch=prefetch,
                     prefix_backing=pol["prefix_backing"] == "host", threshold=threshold, poll_period=poll,
                     seed=seed, preset=preset, budget=budget, horizon=horizon, adapter_bytes=adapter_bytes,
                     bytes_per_token=bytes_per_token, resident_agent_cap=cap, run_id=run_id,
                     check_invariants=check, raw=copy.deepcopy(raw))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    return parse_config(raw, base_dir=path.parent)


def override(raw: dict, path: str, value) -> dict:
    """Copy of ``raw`` with the dotted ``path`` set to ``value``."""
    out = copy.deepcopy(raw)
    section, _, key = path.partition(".")
    out.setdefault(section, {})
    if key:
        out[section][key] = value
    else:
        out[section] = value
    return out
