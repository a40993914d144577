"""Eviction and prefetch policies and the preemptive load-task scheduler."""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from .engine import as_time


class EvictionKind(enum.Enum):
    LRU = "lru"
    DISTANCE_MAX = "distance"


class PrefetchKind(enum.Enum):
    NONE = "none"
    DISTANCE_GUIDED = "distance"


@dataclass(frozen=True)
class EvictionPolicy:
    kind: EvictionKind = EvictionKind.LRU

    @property
    def uses_distance(self) -> bool:
        return self.kind is EvictionKind.DISTANCE_MAX


@dataclass(frozen=True)
class PrefetchPolicy:
    kind: PrefetchKind = PrefetchKind.NONE
    threshold: object = math.inf
    poll_period: Fraction = Fraction(1)
    budget: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "poll_period", as_time(self.poll_period))
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.poll_period <= 0:
            raise ValueError("poll_period must be > 0")

    @property
    def enabled(self) -> bool:
        return self.kind is PrefetchKind.DISTANCE_GUIDED


def _victim_key(obj, kind: EvictionKind):
    if kind is EvictionKind.LRU:
        return (obj.last_use, obj.id)
    d = obj.derived_distance
    if d == math.inf:
        # never-again objects go first; among them, least recently used first
        return (0, obj.last_use, obj.id)
    return (1, -d, obj.id)


def select_victims(candidates: Iterable, need: int, policy: EvictionPolicy | EvictionKind,
                   blocked_by: Optional[Mapping[int, set]] = None) -> tuple[list, bool]:
    """Choose eviction victims until at least ``need`` bytes are covered.

    ``candidates`` are resident, unpinned objects exposing ``id``, ``size``,
    ``last_use`` and ``derived_distance``. ``blocked_by`` maps an object id to
    the ids of candidates that must be evicted before it (prefix-tree children).

    Returns ``(victims, sufficient)``. When the candidates cannot cover
    ``need`` every eligible candidate is returned with ``sufficient=False``.
    """
    kind = policy.kind if isinstance(policy, EvictionPolicy) else policy
    cands = list(candidates)
    if not blocked_by:
        ordered = sorted(cands, key=lambda o: _victim_key(o, kind))
        victims, freed = [], 0
        for obj in ordered:
            if freed >= need:
                break
            victims.append(obj)
            freed += obj.size
        return victims, freed >= need

    by_id = {o.id: o for o in cands}
    remaining = {oid: set(b) & by_id.keys() for oid, b in blocked_by.items() if oid in by_id}
    # reverse index: child -> parents waiting on it
    waiting_on: dict[int, list[int]] = {}
    for oid, deps in remaining.items():
        for d in deps:
            waiting_on.setdefault(d, []).append(oid)
    heap = [(_victim_key(o, kind), o.id) for o in cands if not remaining.get(o.id)]
    heapq.heapify(heap)
    victims, freed = [], 0
    while heap and freed < need:
        _, oid = heapq.heappop(heap)
        obj = by_id[oid]
        victims.append(obj)
        freed += obj.size
        for parent in waiting_on.get(oid, ()):
            deps = remaining[parent]
            deps.discard(oid)
            if not deps:
                heapq.heappush(heap, (_victim_key(by_id[parent], kind), parent))
    return victims, freed >= need


@dataclass(frozen=True)
class PrefetchDecision:
    agent: int
    victims: tuple[int, ...]


def plan_prefetch(offloaded: Mapping[int, object], resident_inactive: Mapping[int, object], free: int,
                  threshold, footprint: Mapping[int, int], reclaimable: Mapping[int, int],
                  budget: Optional[int] = None) -> list[PrefetchDecision]:
    """Stateless prefetch plan over agent distances.

    Offloaded agents below ``threshold`` are taken in ascending distance
    order. Each is planned only if its whole ``footprint`` fits into free
    bytes plus bytes reclaimable from inactive residents with a strictly
    larger distance; such victims are consumed in descending distance order.
    Agents that do not fit are skipped, and already planned prefetches are
    never displaced.
    """
    cands = sorted(((d, a) for a, d in offloaded.items() if d < threshold), key=lambda x: (x[0], x[1]))
    pool = sorted(((d, a) for a, d in resident_inactive.items()), key=lambda x: (-x[0], x[1]))
    pool = [a for _, a in pool]  # descending distance, ties by agent id
    used_victims: set[int] = set()
    plan: list[PrefetchDecision] = []
    left = math.inf if budget is None else budget
    for d, agent in cands:
        need = footprint.get(agent, 0)
        if need <= 0 or need > left:
            continue
        if need <= free:
            plan.append(PrefetchDecision(agent, ()))
            free -= need
            left -= need
            continue
        chosen, gained = [], 0
        for v in pool:
            if v in used_victims or v == agent or not resident_inactive[v] > d:
                continue
            if free + gained >= need:
                break
            size = reclaimable.get(v, 0)
            if size <= 0:
                continue
            chosen.append(v)
            gained += size
        if free + gained < need:
            continue
        used_victims.update(chosen)
        plan.append(PrefetchDecision(agent, tuple(chosen)))
        free = free + gained - need
        left -= need
    return plan


class TaskState(enum.Enum):
    QUEUED = "Queued"
    EXECUTING = "Executing"
    PREEMPTED = "Preempted"
    DONE = "Done"
    CANCELLED = "Cancelled"


@dataclass(eq=False)
class LoadTask:
    task_id: int
    agent: int
    objects: list
    priority: object
    state: TaskState = TaskState.QUEUED
    urgent: bool = False
    preemptions: int = 0
    bytes_moved: int = 0
    history: list = field(default_factory=list)

    @property
    def pending(self) -> bool:
        return self.state in (TaskState.QUEUED, TaskState.PREEMPTED)

    @property
    def live(self) -> bool:
        return self.state in (TaskState.QUEUED, TaskState.PREEMPTED, TaskState.EXECUTING)

    def __repr__(self) -> str:
        return f"LoadTask(#{self.task_id}, agent={self.agent}, D={self.priority}, {self.state.value})"


class LoadScheduler:
    """Centralized priority queue of load tasks over one transfer channel.

    Lower priority value is more urgent; ties go to the lower task id. The
    executing task is checked for preemption at chunk boundaries through
    :meth:`should_preempt`.
    """

    def __init__(self):
        self._heap: list[tuple] = []
        self._ids = itertools.count()
        self.tasks: dict[int, LoadTask] = {}
        self.by_agent: dict[int, LoadTask] = {}
        self.executing: Optional[LoadTask] = None
        self._version: dict[int, int] = {}

    def new_task(self, agent: int, objects: Sequence, priority, urgent: bool = False) -> LoadTask:
        return LoadTask(next(self._ids), agent, list(objects), 0 if urgent else priority, urgent=urgent)

    def _push(self, task: LoadTask) -> None:
        v = self._version.get(task.task_id, 0) + 1
        self._version[task.task_id] = v
        heapq.heappush(self._heap, (task.priority, task.task_id, v))

    def submit(self, task: LoadTask) -> LoadTask:
        """Enqueue ``task``; a live task for the same agent absorbs it instead.

        Returns the task that now represents the agent's load.
        """
        if task.state is not TaskState.QUEUED:
            raise ValueError(f"can only submit queued tasks, got {task}")
        existing = self.by_agent.get(task.agent)
        if existing is not None and existing.live:
            for obj in task.objects:
                if obj not in existing.objects:
                    existing.objects.append(obj)
            existing.urgent = existing.urgent or task.urgent
            self.update_priority(existing, min(existing.priority, task.priority))
            return existing
        self.tasks[task.task_id] = task
        self.by_agent[task.agent] = task
        task.history.append(TaskState.QUEUED)
        self._push(task)
        return task

    def update_priority(self, task: LoadTask, priority) -> None:
        if task.urgent:
            priority = 0
        if priority == task.priority:
            return
        task.priority = priority
        if task.pending:
            self._push(task)

    def mark_urgent(self, task: LoadTask) -> None:
        task.urgent = True
        self.update_priority(task, 0)

    def _clean(self) -> None:
        while self._heap:
            prio, tid, v = self._heap[0]
            task = self.tasks.get(tid)
            if task is None or not task.pending or self._version[tid] != v:
                heapq.heappop(self._heap)
                continue
            return

    def peek(self) -> Optional[LoadTask]:
        self._clean()
        return self.tasks[self._heap[0][1]] if self._heap else None

    def queued(self) -> list[LoadTask]:
        return sorted((t for t in self.tasks.values() if t.pending), key=lambda t: (t.priority, t.task_id))

    def pop_next(self) -> Optional[LoadTask]:
        if self.executing is not None:
            raise RuntimeError("channel busy")
        task = self.peek()
        if task is None:
            return None
        heapq.heappop(self._heap)
        task.state = TaskState.EXECUTING
        task.history.append(TaskState.EXECUTING)
        self.executing = task
        return task

    def should_preempt(self, task: LoadTask) -> bool:
        head = self.peek()
        return head is not None and head.priority < task.priority

    def requeue(self, task: LoadTask) -> None:
        """Put an interrupted executing task back into the queue."""
        if task is not self.executing:
            raise RuntimeError(f"{task} is not executing")
        self.executing = None
        task.state = TaskState.PREEMPTED
        task.preemptions += 1
        task.history.append(TaskState.PREEMPTED)
        self._push(task)

    def finish(self, task: LoadTask) -> None:
        if task is not self.executing:
            raise RuntimeError(f"{task} is not executing")
        self.executing = None
        task.state = TaskState.DONE
        task.history.append(TaskState.DONE)
        if self.by_agent.get(task.agent) is task:
            del self.by_agent[task.agent]

    def cancel(self, task: LoadTask) -> None:
        if not task.pending:
            raise RuntimeError(f"only queued tasks can be cancelled, got {task}")
        task.state = TaskState.CANCELLED
        task.history.append(TaskState.CANCELLED)
        if self.by_agent.get(task.agent) is task:
            del self.by_agent[task.agent]

    def stale_tasks(self, agent_distances: Mapping[int, object], threshold) -> list[LoadTask]:
        """Queued, non-urgent tasks whose agent's distance rose to or above ``threshold``."""
        return [t for t in self.queued()
                if not t.urgent and agent_distances.get(t.agent, math.inf) >= threshold]

    def live_tasks(self) -> list[LoadTask]:
        return [t for t in self.tasks.values() if t.live]
