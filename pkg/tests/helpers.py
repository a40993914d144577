"""Scenario builders and reference oracles shared by the test modules."""

from __future__ import annotations

import math
from fractions import Fraction

from idmem.engine import CostModel
from idmem.policy import EvictionKind, EvictionPolicy, PrefetchKind, PrefetchPolicy
from idmem.simulator import MemoryConfig, Simulator
from idmem.workload import WorkloadConfig, generate

MiB = 2**20


def tiny_cost(**kw) -> CostModel:
    """Near-instant compute and transfers so activation order follows the integer plan."""
    base = dict(prefill_per_token=Fraction(1, 1000), decode_per_token=Fraction(1, 1000),
                transfer_bandwidth=1024 * MiB, chunk_size=MiB)
    base.update(kw)
    return CostModel(**base)


def scripted(n, steps, starts, plan, slots, eviction="lru", prefetch="none", backing=True, threshold=math.inf,
             poll=1, adapter_bytes=MiB, cost=None, check=True, record_trace=True, budget=None) -> Simulator:
    """Adapter-only agents (uniform footprints) with explicit start times and action lengths."""
    wc = WorkloadConfig(category="independent", n_agents=n, steps=steps, start_offsets=list(starts),
                        action_plan=[list(p) for p in plan], fresh_tokens=0, output_tokens=1,
                        shared_prefix_tokens=0, private_prefix_tokens=0)
    cost = cost or tiny_cost()
    world = generate(wc, cost)
    mem = MemoryConfig(capacity=slots * adapter_bytes, adapter_bytes=adapter_bytes, prefix_backing=backing)
    return Simulator(world, cost, mem, EvictionPolicy(EvictionKind(eviction)),
                     PrefetchPolicy(PrefetchKind(prefetch), threshold, poll, budget),
                     record_trace=record_trace, check_invariants=check)


def activation_trace(sim: Simulator) -> list[int]:
    return [r.agent for r in sorted(sim.records, key=lambda r: (r.t_issue, r.agent))]


def belady_min(seq: list, capacity: int) -> int:
    """Fewest misses any eviction schedule achieves on ``seq`` (exhaustive search over cache states)."""
    states = {frozenset(): 0}
    for item in seq:
        nxt: dict[frozenset, int] = {}

        def put(state, cost):
            if cost < nxt.get(state, math.inf):
                nxt[state] = cost

        for cache, misses in states.items():
            if item in cache:
                put(cache, misses)
            elif len(cache) < capacity:
                put(cache | {item}, misses + 1)
            else:
                for victim in cache:
                    put((cache - {victim}) | {item}, misses + 1)
        states = nxt
    return min(states.values())


def random_plan(rng, n, steps, spacing=10):
    """Start offsets and integer action lengths; issue times land on distinct ticks only by luck,
    so callers should check :func:`distinct_issue_ticks` on the finished run."""
    starts = [int(x) for x in rng.integers(0, spacing * n, size=n)]
    plan = [[int(x) for x in rng.integers(1, spacing * n, size=max(1, steps - 1))] for _ in range(n)]
    return starts, plan


def distinct_issue_ticks(sim: Simulator) -> bool:
    ticks = [math.floor(r.t_issue) for r in sim.records]
    return len(ticks) == len(set(ticks))


def no_overlap(sim: Simulator) -> bool:
    recs = sorted(sim.records, key=lambda r: r.t_issue)
    return all(a.t_done <= b.t_issue for a, b in zip(recs, recs[1:]))


def simulate(wc: WorkloadConfig, cost=None, capacity=None, eviction="lru", prefetch="none", backing=True,
             threshold=math.inf, poll=1, adapter_bytes=MiB, bytes_per_token=1024, check=True,
             record_trace=True, world=None) -> Simulator:
    """Simulator over any workload; capacity defaults to room for every agent."""
    cost = cost or tiny_cost()
    world = world or generate(wc, cost)
    if capacity is None:
        per_agent = adapter_bytes + (wc.shared_prefix_tokens + wc.private_prefix_tokens) * bytes_per_token
        capacity = wc.n_agents * per_agent
    mem = MemoryConfig(capacity=capacity, adapter_bytes=adapter_bytes, bytes_per_token=bytes_per_token,
                       prefix_backing=backing)
    return Simulator(world, cost, mem, EvictionPolicy(EvictionKind(eviction)),
                     PrefetchPolicy(PrefetchKind(prefetch), threshold, poll),
                     record_trace=record_trace, check_invariants=check)


def issue_times(sim: Simulator) -> dict:
    out: dict = {}
    for r in sorted(sim.records, key=lambda r: r.t_issue):
        out.setdefault(r.agent, []).append(r.t_issue)
    return out
