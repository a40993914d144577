"""Discrete-event simulator for invocation-distance-guided memory management of LLM agents."""

from .config import PRESETS, ConfigError, RunConfig, load_config, parse_config
from .engine import CostModel, Engine, EventKind, Phase
from .metrics import RunReport, breakdown, speedup, ttft
from .policy import EvictionKind, EvictionPolicy, PrefetchKind, PrefetchPolicy, plan_prefetch, select_victims
from .simulator import MemoryConfig, Simulator
from .workload import WorkloadConfig, estimate_distance, generate

__all__ = [
    "PRESETS", "ConfigError", "RunConfig", "load_config", "parse_config", "CostModel", "Engine", "EventKind",
    "Phase", "RunReport", "breakdown", "speedup", "ttft", "EvictionKind", "EvictionPolicy", "PrefetchKind",
    "PrefetchPolicy", "plan_prefetch", "select_victims", "MemoryConfig", "Simulator", "WorkloadConfig",
    "estimate_distance", "generate",
]
