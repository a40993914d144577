"""Event handlers tying the workload, memory manager and load scheduler together."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .engine import INF, Agent, CostModel, Engine, EventKind, Phase
from .memory import (AdapterStore, InsufficientMemory, InvariantViolation, LazyDistances, MemoryManager,
                     PrefixTree, Request, Residency, TransferChannel)
from .metrics import RequestRecord, RunReport, build_report
from .policy import EvictionPolicy, LoadScheduler, PrefetchPolicy
from .workload import World, estimate_distance

log = logging.getLogger(__name__)


@dataclass
class MemoryConfig:
    capacity: int
    adapter_bytes: int = 32 * 2**20
    bytes_per_token: int = 64 * 1024
    prefix_backing: bool = False


@dataclass(eq=False)
class _Pending:
    request: Request
    objects: list
    record: RequestRecord
    waiting: set = field(default_factory=set)
    blocked_since: Optional[Fraction] = None


class Simulator:
    """One deterministic run over an initialized :class:`World`.

    ``check_invariants`` re-verifies capacity, pinning, residency and
    distance coherence after every event (slow; meant for tests).
    """

    def __init__(self, world: World, cost: CostModel, memory: MemoryConfig,
                 eviction: EvictionPolicy = EvictionPolicy(), prefetch: PrefetchPolicy = PrefetchPolicy(),
                 record_trace: bool = True, check_invariants: bool = False, meta: Optional[dict] = None):
        self.world = world
        self.cost = cost
        self.eviction = eviction
        self.prefetch = prefetch
        self.meta = meta or {}
        self.engine = Engine(record_trace)
        self.scheduler = LoadScheduler()
        self.mem = MemoryManager(memory.capacity, cost, eviction, self.scheduler)
        self.mem.now = lambda: self.engine.clock
        self.adapters = self.mem.register(AdapterStore(memory.adapter_bytes))
        self.prefix = self.mem.register(PrefixTree(memory.bytes_per_token, memory.prefix_backing))
        self.channel = TransferChannel(self.engine, self.mem, on_object_loaded=self._object_loaded)
        self.agents: dict[int, Agent] = {a.id: a for a in world.agents}
        self.pending: dict[int, _Pending] = {}
        self.waiters: dict[int, set] = defaultdict(set)
        self.blocked: list[int] = []
        self.records: list[RequestRecord] = []
        self.pending_messages = 0
        self._action_events: dict[int, object] = {}
        self._check = check_invariants
        self._done = False
        self.max_concurrent_active = 0
        self._busy_at_done = Fraction(0)

        e = self.engine
        e.on(EventKind.AGENT_REQUEST_ISSUED, self._on_request)
        e.on(EventKind.ACTION_FINISHED, self._on_action_finished)
        e.on(EventKind.GENERATION_FINISHED, self._on_generation_finished)
        e.on(EventKind.PREFETCH_POLL, self._on_poll)
        e.on(EventKind.INTERACTION_TRIGGERED, self._on_interaction)
        e.on(EventKind.MESSAGE_ARRIVAL, self._on_message)
        e.on(EventKind.MOVEMENT_TICK, self._on_movement)
        if check_invariants:
            e.hooks.append(self._verify)
        self._setup()

    # -- setup --------------------------------------------------------------
    def _setup(self) -> None:
        w = self.world
        initial = Residency.HOST if self.prefix.backed else Residency.ABSENT
        footprint = 0
        for a in self.agents.values():
            self.mem.register_agent(a.id)
            self.adapters.adapter_for(a.id)
            tokens = w.prefix_tokens(a.id)
            if tokens:
                self.prefix.assign(a.id, tokens, residency=initial)
            footprint = max(footprint, sum(self.mem.objects[i].size for i in self.mem.agent_refs[a.id]))
        if footprint > self.mem.tier.capacity:
            raise ValueError(f"device capacity {self.mem.tier.capacity} cannot hold one agent ({footprint} bytes)")
        for aid, t in sorted(w.start_times.items(), key=lambda kv: (kv[1], kv[0])):
            if w.category == "diffusion":
                w.activated.add(aid)
                w.invalidate_hops()
                self.engine.at(t, EventKind.AGENT_REQUEST_ISSUED, aid)
            else:
                self._action_events[aid] = self.engine.at(t, EventKind.ACTION_FINISHED, aid)
        if self.eviction.uses_distance or self.prefetch.enabled:
            self.engine.at(0, EventKind.PREFETCH_POLL)
        if w.category == "interaction":
            self.engine.at(w.config.step_length, EventKind.MOVEMENT_TICK)

    # -- distances ----------------------------------------------------------
    def distance(self, agent_id: int):
        return estimate_distance(self.agents[agent_id], self.world, self.engine.clock)

    def distances(self) -> LazyDistances:
        return LazyDistances(self.distance)

    def refresh_distances(self) -> dict:
        w = self.world
        if w.category == "interaction":
            w.refresh_interaction(self.engine.clock)
        d = {a: self.distance(a) for a in sorted(self.agents)}
        for a, v in d.items():
            self.agents[a].distance = v
        self.mem.recompute_object_distances(d)
        return d

    # -- termination ----------------------------------------------------------
    def finished(self) -> bool:
        if self.pending or self.blocked:
            return False
        if self.world.category == "diffusion":
            return self.pending_messages == 0
        steps = self.world.config.steps
        return all(a.calls_done >= steps for a in self.agents.values())

    # -- handlers -------------------------------------------------------------
    def _on_action_finished(self, event) -> None:
        aid = event.payload[0]
        self._action_events.pop(aid, None)
        self._issue(self.agents[aid])

    def _on_request(self, event) -> None:
        agent = self.agents[event.payload[0]]
        if not agent.active:
            self._issue(agent)

    def _issue(self, agent: Agent) -> None:
        now = self.engine.clock
        req = self.world.request_for(agent)
        objs = self.mem.handle_req(req, agent.id)
        rec = RequestRecord(agent.id, now)
        rec.miss = any(not o.resident for o in objs)
        rec.loaded_bytes = sum(o.size - o.loaded_bytes for o in objs
                               if o.residency in (Residency.HOST, Residency.LOADING))
        agent.action_end = None
        agent.workload_state.pop("est_end", None)
        agent.transition(Phase.WAITING_FOR_MEMORY)
        agent.distance = 0
        st = _Pending(req, objs, rec)
        self.pending[agent.id] = st
        n_active = len(self.pending)
        self.max_concurrent_active = max(self.max_concurrent_active, n_active)
        if not self._acquire(agent, st):
            st.blocked_since = now
            self.blocked.append(agent.id)

    def _acquire(self, agent: Agent, st: _Pending) -> bool:
        """Reserve device space and start the transfers ``st`` needs; False if blocked."""
        mem = self.mem
        missing = mem.missing(st.objects)
        need = mem.reservation_needed(missing)
        # pin first so that making room never evicts the agent's own objects
        mem.pin_agent(agent.id, st.objects)
        if not self._make_room(need):
            mem.unpin_agent(agent.id)
            return False
        mem.reserve(missing)
        mem.touch(st.objects, self.engine.clock)
        if st.blocked_since is not None:
            st.record.blocked += self.engine.clock - st.blocked_since
            st.blocked_since = None
        restore = [o for o in missing if o.residency in (Residency.HOST, Residency.LOADING)]
        own = [o for o in restore if o.claimed_by is None]
        for o in restore:
            if o.claimed_by is not None:
                self.scheduler.mark_urgent(self.scheduler.tasks[o.claimed_by])
        existing = self.scheduler.by_agent.get(agent.id)
        if own or (existing is not None and existing.live):
            task = self.scheduler.submit(self.scheduler.new_task(agent.id, own, 0, urgent=True))
            mem.claim(task, own)
        st.waiting = {o.id for o in restore}
        for oid in st.waiting:
            self.waiters[oid].add(agent.id)
        if st.waiting:
            self.channel.kick()
        else:
            self._start_generation(agent, st)
        return True

    def _make_room(self, need: int) -> bool:
        if need <= self.mem.tier.free:
            return True
        dist = self.distances() if self.eviction.uses_distance else None
        while True:
            try:
                self.mem.make_room(need, dist)
                return True
            except InsufficientMemory:
                pass
            # drop the least urgent queued prefetch and try again
            stale = [t for t in self.scheduler.queued() if not t.urgent]
            if not stale:
                return False
            victim = stale[-1]
            self.scheduler.cancel(victim)
            self.mem.release_task(victim)

    def _object_loaded(self, obj) -> None:
        for aid in sorted(self.waiters.pop(obj.id, ())):
            st = self.pending.get(aid)
            if st is None:
                continue
            st.waiting.discard(obj.id)
            if not st.waiting:
                self._start_generation(self.agents[aid], st)

    def _start_generation(self, agent: Agent, st: _Pending) -> None:
        now = self.engine.clock
        req, rec = st.request, st.record
        rec.t_memory_ready = now
        cached, _ = self.prefix.match_prefix(req.prefix_tokens)
        for o in st.objects:
            if o.residency is Residency.ABSENT:
                self.mem.materialize(o)
        bad = [o for o in st.objects if not o.resident]
        if bad:
            raise InvariantViolation(f"agent {agent.id} starts generating with non-resident {bad}")
        rec.recomputed_tokens = len(req.prefix_tokens) - cached
        rec.prefill = self.cost.prefill_time(req.prompt_tokens, cached)
        rec.decode = self.cost.decode_time(req.output_tokens)
        rec.t_first_token = now + rec.prefill
        agent.transition(Phase.GENERATING)
        self.engine.at(rec.t_first_token + rec.decode, EventKind.GENERATION_FINISHED, agent.id)

    def _on_generation_finished(self, event) -> None:
        now = self.engine.clock
        agent = self.agents[event.payload[0]]
        st = self.pending.pop(agent.id)
        st.record.t_done = now
        self.records.append(st.record)
        self.mem.touch(st.objects, now)
        self.mem.unpin_agent(agent.id)
        agent.calls_done += 1
        w = self.world
        if w.category == "diffusion":
            agent.transition(Phase.IDLE)
            agent.distance = INF
            for nb in w.graph.adjacency[agent.id]:
                if nb not in w.activated:
                    self.pending_messages += 1
                    self.engine.after(w.config.propagation_delay, EventKind.MESSAGE_ARRIVAL, nb)
        elif agent.calls_done >= w.config.steps:
            agent.transition(Phase.IDLE)
            agent.distance = INF
        else:
            dur = w.draw_action(agent)
            agent.transition(Phase.ACTING)
            agent.action_end = now + dur
            agent.workload_state["est_end"] = now + w.noisy(dur)
            self._action_events[agent.id] = self.engine.at(agent.action_end, EventKind.ACTION_FINISHED, agent.id)
        self._retry_blocked()
        self._busy_at_done = self.channel.busy_until(now)
        if self.finished():
            # whatever is still queued is speculative and would only run past the makespan
            self.engine.stop()

    def _retry_blocked(self) -> None:
        while self.blocked:
            aid = self.blocked[0]
            if not self._acquire(self.agents[aid], self.pending[aid]):
                return
            self.blocked.pop(0)

    def _on_message(self, event) -> None:
        self.pending_messages -= 1
        aid = event.payload[0]
        w = self.world
        if aid in w.activated:
            return
        w.activated.add(aid)
        w.invalidate_hops()
        self._issue(self.agents[aid])

    def _on_movement(self, event) -> None:
        w = self.world
        now = self.engine.clock
        w.spatial.advance(now)
        for a, b in w.contacts(now):
            w.pair_cooldown[(a, b)] = now + w.cooldown
            self.engine.at(now, EventKind.INTERACTION_TRIGGERED, a, b)
        if not self.finished():
            self.engine.after(w.config.step_length, EventKind.MOVEMENT_TICK)

    def _on_interaction(self, event) -> None:
        a, b = (self.agents[i] for i in event.payload)
        if a.phase is not Phase.ACTING or b.phase is not Phase.ACTING:
            return
        for agent in (a, b):
            self.engine.cancel(self._action_events.pop(agent.id, None))
            self._issue(agent)

    def _on_poll(self, event) -> None:
        dist = self.refresh_distances()
        p = self.prefetch
        if p.enabled:
            for task in self.scheduler.stale_tasks(dist, p.threshold):
                self.scheduler.cancel(task)
                self.mem.release_task(task)
            for task in self.scheduler.live_tasks():
                if not task.urgent:
                    self.scheduler.update_priority(task, dist[task.agent])
            self.mem.dispatch_load_tasks(dist, p.threshold, p.budget)
            self.channel.kick()
            self._retry_blocked()
        if not self.finished():
            self.engine.after(p.poll_period, EventKind.PREFETCH_POLL)

    # -- checks -------------------------------------------------------------------
    def _verify(self, event) -> None:
        self.mem.check_invariants()
        for a in self.agents.values():
            if a.phase is Phase.GENERATING:
                for oid in self.mem.agent_refs[a.id]:
                    if not self.mem.objects[oid].resident:
                        raise InvariantViolation(f"agent {a.id} generating with object {oid} off device")
        ex = self.scheduler.executing
        if ex is not None and event.kind is EventKind.TRANSFER_CHUNK_DONE:
            # the probe at each chunk boundary keeps the most urgent task on the channel
            head = self.scheduler.peek()
            if head is not None and head.priority < ex.priority:
                raise InvariantViolation(f"{ex} kept running past a chunk boundary while {head} waits")
        if event.kind is EventKind.PREFETCH_POLL:
            d = {a: self.distance(a) for a in self.agents}
            self.mem.check_invariants(d)

    # -- driver -------------------------------------------------------------------
    def run_until(self, limit=None) -> RunReport:
        self.engine.run(limit)
        return self.report()

    def report(self) -> RunReport:
        cfg = self.world.config
        return build_report(self.records, self.mem.transferred_bytes, cfg.step_length,
                            transfer_time=self._busy_at_done, n_agents=cfg.n_agents, seed=cfg.seed, **self.meta)
