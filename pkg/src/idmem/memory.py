"""Two-tier (device/host) memory model and agent-specific memory modules."""

from __future__ import annotations

import abc
import enum
import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .engine import CostModel, Engine, EventKind
from .policy import (EvictionPolicy, LoadScheduler, LoadTask, TaskState, plan_prefetch,
                     select_victims)


class Residency(enum.Enum):
    DEVICE = "DeviceResident"
    HOST = "HostOnly"
    ABSENT = "Absent"
    LOADING = "LoadingInProgress"


_LEGAL = {
    (Residency.HOST, Residency.LOADING),
    (Residency.LOADING, Residency.DEVICE),
    (Residency.DEVICE, Residency.HOST),
    (Residency.DEVICE, Residency.ABSENT),
    (Residency.ABSENT, Residency.DEVICE),  # recompute
    (Residency.LOADING, Residency.HOST),  # cancelled load drops its partial chunks
}


class InsufficientMemory(RuntimeError):
    def __init__(self, need: int, available: int):
        super().__init__(f"need {need} bytes, only {available} reclaimable")
        self.need = need
        self.available = available


class NotRestorable(RuntimeError):
    """The object has no host copy and must be recomputed."""


class InvariantViolation(RuntimeError):
    pass


@dataclass(eq=False)
class MemoryObject:
    id: int
    size: int
    module: str
    backed_on_host: bool
    residency: Residency = Residency.HOST
    referencing_agents: set = field(default_factory=set)
    derived_distance: object = math.inf
    last_use: Fraction = Fraction(0)
    loaded_bytes: int = 0
    loaded_chunks: int = 0
    reserved: int = 0
    claimed_by: Optional[int] = None
    transitions: list = field(default_factory=list)

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("object size must be positive")

    def move(self, new: Residency) -> None:
        if (self.residency, new) not in _LEGAL:
            raise InvariantViolation(f"object {self.id}: illegal residency {self.residency.value} -> {new.value}")
        self.transitions.append((self.residency, new))
        self.residency = new

    @property
    def resident(self) -> bool:
        return self.residency is Residency.DEVICE

    def __repr__(self) -> str:
        return f"MemoryObject(#{self.id} {self.module} {self.size}B {self.residency.value})"


@dataclass
class DeviceTier:
    capacity: int
    used: int = 0
    reserved: int = 0
    resident_set: set = field(default_factory=set)

    @property
    def free(self) -> int:
        return self.capacity - self.used - self.reserved

    def reserve(self, nbytes: int) -> None:
        if nbytes > self.free:
            raise InsufficientMemory(nbytes, self.free)
        self.reserved += nbytes

    def release(self, nbytes: int) -> None:
        self.reserved -= nbytes
        assert self.reserved >= 0

    def commit(self, nbytes: int) -> None:
        """Turn reserved bytes into allocated ones."""
        self.reserved -= nbytes
        self.used += nbytes
        assert self.reserved >= 0

    def drop(self, nbytes: int) -> None:
        self.used -= nbytes
        assert self.used >= 0


@dataclass(frozen=True)
class Request:
    agent_id: int
    prefix_tokens: tuple = ()
    fresh_tokens: int = 0
    output_tokens: int = 0

    @property
    def prompt_tokens(self) -> int:
        return len(self.prefix_tokens) + self.fresh_tokens


class MemoryModule(abc.ABC):
    """Agent-specific memory with the four management entry points.

    Subclasses implement :meth:`handle_req`; eviction, load dispatch and
    loading go through the manager the module is registered with so that one
    policy arbitrates across all modules.
    """

    name = "module"

    def __init__(self):
        self.manager: Optional[MemoryManager] = None
        self.object_ids: set[int] = set()

    def attach(self, manager: "MemoryManager") -> None:
        self.manager = manager

    @abc.abstractmethod
    def handle_req(self, request: Request, agent_id: int) -> list[MemoryObject]:
        ...

    def blocked_by(self, candidates: Sequence[MemoryObject]) -> dict[int, set]:
        return {}

    def evict(self, size_needed: int, agent_distances: Mapping[int, object]) -> list[MemoryObject]:
        return self.manager.evict(size_needed, agent_distances, modules=[self])

    def dispatch_load_tasks(self, agent_distances, threshold, budget=None) -> list[LoadTask]:
        return self.manager.dispatch_load_tasks(agent_distances, threshold, budget, modules=[self])

    def load(self, objects, agent_ids, preemption_probe):
        return self.manager.load(objects, agent_ids, preemption_probe)


class AdapterStore(MemoryModule):
    """One host-backed adapter object per agent, loaded atomically."""

    name = "adapter"

    def __init__(self, adapter_bytes: int):
        super().__init__()
        self.adapter_bytes = adapter_bytes
        self.by_agent: dict[int, MemoryObject] = {}

    def adapter_for(self, agent_id: int) -> MemoryObject:
        obj = self.by_agent.get(agent_id)
        if obj is None:
            obj = self.manager.create_object(self, self.adapter_bytes, backed=True, residency=Residency.HOST)
            self.by_agent[agent_id] = obj
            self.manager.reference(agent_id, obj)
        return obj

    def handle_req(self, request, agent_id):
        return [self.adapter_for(agent_id)]


@dataclass(eq=False)
class PrefixNode:
    tokens: tuple
    obj: Optional[MemoryObject] = None
    parent: Optional["PrefixNode"] = None
    children: dict = field(default_factory=dict)

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    @property
    def id(self):
        return None if self.obj is None else self.obj.id

    @property
    def is_root(self) -> bool:
        return self.parent is None

    @property
    def referencing_agents(self) -> set:
        return set() if self.obj is None else self.obj.referencing_agents


def _common(node_tokens: tuple, tokens: tuple, start: int) -> int:
    """Length of the common prefix of ``node_tokens`` and ``tokens[start:]``."""
    n = min(len(node_tokens), len(tokens) - start)
    if node_tokens[:n] == tokens[start:start + n]:
        return n
    lo, hi = 0, n  # common length lies in [lo, hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if node_tokens[:mid] == tokens[start:start + mid]:
            lo = mid
        else:
            hi = mid
    return lo


class PrefixTree(MemoryModule):
    """Radix tree of reusable prompt prefixes, one memory object per node.

    A node's size is ``token_count * bytes_per_token``. With ``backed`` false
    an evicted node is discarded and has to be recomputed by prefill.
    """

    name = "prefix"

    def __init__(self, bytes_per_token: int = 64 * 1024, backed: bool = False):
        super().__init__()
        self.bytes_per_token = bytes_per_token
        self.backed = backed
        self.root = PrefixNode(())
        self.nodes: dict[int, PrefixNode] = {}
        self.paths: dict[int, list[PrefixNode]] = {}
        self._assigned: dict[int, tuple] = {}

    def _new_node(self, tokens, parent, residency) -> PrefixNode:
        obj = self.manager.create_object(self, len(tokens) * self.bytes_per_token, backed=self.backed,
                                         residency=residency)
        node = PrefixNode(tuple(tokens), obj, parent)
        self.nodes[obj.id] = node
        return node

    def _split(self, node: PrefixNode, k: int) -> None:
        """Keep the first ``k`` tokens in ``node`` and move the rest to a new child."""
        obj = node.obj
        if obj.residency is Residency.LOADING or obj.reserved:
            raise RuntimeError(f"cannot split prefix node {obj.id} while it is being loaded")
        tail = node.tokens[k:]
        # bytes move from parent to child, so the tier total is unchanged
        child_obj = self.manager.create_object(self, len(tail) * self.bytes_per_token, backed=obj.backed_on_host,
                                               residency=obj.residency, account=False)
        child = PrefixNode(tail, child_obj, node, node.children)
        for c in child.children.values():
            c.parent = child
        node.tokens = node.tokens[:k]
        obj.size = k * self.bytes_per_token
        node.children = {tail[0]: child}
        child_obj.last_use = obj.last_use
        child_obj.derived_distance = obj.derived_distance
        for a in obj.referencing_agents:
            self.manager.reference(a, child_obj)
        if obj.resident:
            self.manager.tier.resident_set.add(child_obj.id)
        self.nodes[child_obj.id] = child
        # every path through the old node consumed all of its tokens
        for path in self.paths.values():
            if node in path:
                path.insert(path.index(node) + 1, child)

    def insert(self, tokens: Sequence, residency: Residency = Residency.ABSENT) -> list[PrefixNode]:
        """Walk ``tokens`` from the root, creating and splitting nodes; returns the node path."""
        tokens = tuple(tokens)
        node, i, path = self.root, 0, []
        while i < len(tokens):
            child = node.children.get(tokens[i])
            if child is None:
                new = self._new_node(tokens[i:], node, residency)
                node.children[tokens[i]] = new
                path.append(new)
                break
            m = _common(child.tokens, tokens, i)
            if m < child.token_count:
                self._split(child, m)
            path.append(child)
            node = child
            i += m
        return path

    def assign(self, agent_id: int, tokens: Sequence, residency: Residency = Residency.ABSENT) -> list[PrefixNode]:
        tokens = tuple(tokens)
        if self._assigned.get(agent_id) == tokens:
            return self.paths[agent_id]
        path = self.insert(tokens, residency)
        self._assigned[agent_id] = tokens
        old = self.paths.get(agent_id, [])
        keep = {n.id for n in path}
        for n in old:
            if n.id not in keep:
                self.manager.unreference(agent_id, n.obj)
        for n in path:
            self.manager.reference(agent_id, n.obj)
        self.paths[agent_id] = path
        return path

    def handle_req(self, request, agent_id):
        if not request.prefix_tokens:
            return []
        return [n.obj for n in self.assign(agent_id, request.prefix_tokens)]

    def match_prefix(self, tokens: Sequence) -> tuple[int, list[PrefixNode]]:
        """Longest prefix of ``tokens`` covered by device-resident nodes."""
        tokens = tuple(tokens)
        node, i, path = self.root, 0, [self.root]
        while i < len(tokens):
            child = node.children.get(tokens[i])
            if child is None or not child.obj.resident:
                break
            m = _common(child.tokens, tokens, i)
            path.append(child)
            i += m
            if m < child.token_count:
                break
            node = child
        return i, path

    def blocked_by(self, candidates):
        out = {}
        for obj in candidates:
            node = self.nodes.get(obj.id)
            if node is None:
                continue
            live = {c.obj.id for c in node.children.values()
                    if c.obj.residency in (Residency.DEVICE, Residency.LOADING)}
            if live:
                out[obj.id] = live
        return out


class LazyDistances(dict):
    """Agent distance map filled on first lookup."""

    def __init__(self, fn: Callable[[int], object]):
        super().__init__()
        self._fn = fn

    def __missing__(self, agent):
        value = self[agent] = self._fn(agent)
        return value


class MemoryManager:
    """Owns the device tier, all memory objects and the registered modules."""

    def __init__(self, capacity: int, cost: CostModel, eviction: EvictionPolicy = EvictionPolicy(),
                 scheduler: Optional[LoadScheduler] = None):
        self.tier = DeviceTier(capacity)
        self.cost = cost
        self.eviction = eviction
        self.scheduler = scheduler or LoadScheduler()
        self.objects: dict[int, MemoryObject] = {}
        self.modules: dict[str, MemoryModule] = {}
        self._ids = itertools.count()
        self.agents: set[int] = set()
        self.agent_refs: dict[int, set[int]] = defaultdict(set)
        self.pins: Counter = Counter()
        self.pinned_by: dict[int, list[MemoryObject]] = {}
        self.transferred_bytes = 0
        self.evicted: list[int] = []
        self.now: Callable[[], Fraction] = lambda: Fraction(0)

    # -- registration -------------------------------------------------------
    def register(self, module: MemoryModule) -> MemoryModule:
        module.attach(self)
        self.modules[module.name] = module
        return module

    def register_agent(self, agent_id: int) -> None:
        self.agents.add(agent_id)

    def create_object(self, module: MemoryModule, size: int, backed: bool, residency: Residency,
                      account: bool = True) -> MemoryObject:
        obj = MemoryObject(next(self._ids), size, module.name, backed, residency)
        self.objects[obj.id] = obj
        module.object_ids.add(obj.id)
        if residency is Residency.DEVICE and account:
            self.tier.reserve(size)
            self.tier.commit(size)
            self.tier.resident_set.add(obj.id)
        return obj

    def reference(self, agent_id: int, obj: MemoryObject) -> None:
        obj.referencing_agents.add(agent_id)
        self.agent_refs[agent_id].add(obj.id)

    def unreference(self, agent_id: int, obj: MemoryObject) -> None:
        obj.referencing_agents.discard(agent_id)
        self.agent_refs[agent_id].discard(obj.id)

    def module_of(self, obj: MemoryObject) -> MemoryModule:
        return self.modules[obj.module]

    # -- requests -----------------------------------------------------------
    def handle_req(self, request: Request, agent_id: int) -> list[MemoryObject]:
        """Map the request onto memory objects; returns those needed on device."""
        if agent_id not in self.agents:
            raise KeyError(f"unknown agent {agent_id}")
        out, seen = [], set()
        for module in self.modules.values():
            for obj in module.handle_req(request, agent_id):
                if obj.id not in seen:
                    seen.add(obj.id)
                    out.append(obj)
        return out

    def pin_agent(self, agent_id: int, objs: Iterable[MemoryObject]) -> None:
        if agent_id in self.pinned_by:
            raise RuntimeError(f"agent {agent_id} already pinned")
        objs = list(objs)
        self.pinned_by[agent_id] = objs
        for o in objs:
            self.pins[o.id] += 1

    def unpin_agent(self, agent_id: int) -> None:
        for o in self.pinned_by.pop(agent_id, ()):
            self.pins[o.id] -= 1
            if not self.pins[o.id]:
                del self.pins[o.id]

    @property
    def active_agents(self) -> set:
        return set(self.pinned_by)

    def touch(self, objs: Iterable[MemoryObject], now: Fraction) -> None:
        for o in objs:
            o.last_use = now

    # -- distances ----------------------------------------------------------
    def recompute_object_distances(self, agent_distances: Mapping[int, object], changed_agents=None,
                                   objects: Optional[Iterable[MemoryObject]] = None) -> None:
        """Set each object's distance to the minimum over its referencing agents."""
        if objects is None:
            if changed_agents is None:
                objects = self.objects.values()
            else:
                ids = set()
                for a in changed_agents:
                    ids |= self.agent_refs.get(a, set())
                objects = (self.objects[i] for i in sorted(ids))
        for obj in objects:
            best = math.inf
            for a in obj.referencing_agents:
                d = agent_distances[a]
                if d < best:
                    best = d
                    if best == 0:
                        break
            obj.derived_distance = best

    # -- eviction -----------------------------------------------------------
    def candidates(self, modules: Optional[Iterable[MemoryModule]] = None) -> list[MemoryObject]:
        names = None if modules is None else {m.name for m in modules}
        return [self.objects[i] for i in sorted(self.tier.resident_set)
                if i not in self.pins and (names is None or self.objects[i].module in names)]

    def _blocked(self, cands) -> dict[int, set]:
        out = {}
        for module in self.modules.values():
            out.update(module.blocked_by([c for c in cands if c.module == module.name]))
        return out

    def evict(self, size_needed: int, agent_distances: Optional[Mapping[int, object]] = None,
              modules: Optional[Iterable[MemoryModule]] = None) -> list[MemoryObject]:
        """Free at least ``size_needed`` bytes of resident, unpinned objects.

        Nothing is evicted when the candidates cannot cover the request;
        :class:`InsufficientMemory` is raised instead.
        """
        if size_needed <= 0:
            raise ValueError("size_needed must be positive")
        cands = self.candidates(modules)
        if self.eviction.uses_distance:
            if agent_distances is None:
                raise ValueError("distance eviction needs agent distances")
            self.recompute_object_distances(agent_distances, objects=cands)
        victims, ok = select_victims(cands, size_needed, self.eviction, self._blocked(cands))
        if not ok:
            raise InsufficientMemory(size_needed, sum(v.size for v in victims))
        self.evict_objects(victims)
        return victims

    def evict_objects(self, victims: Iterable[MemoryObject]) -> None:
        for obj in victims:
            if obj.id in self.pins:
                raise InvariantViolation(f"evicting pinned object {obj.id}")
            obj.move(Residency.HOST if obj.backed_on_host else Residency.ABSENT)
            obj.loaded_bytes = 0
            obj.loaded_chunks = 0
            self.tier.drop(obj.size)
            self.tier.resident_set.discard(obj.id)
            self.evicted.append(obj.id)

    def make_room(self, nbytes: int, agent_distances=None) -> list[MemoryObject]:
        """Evict just enough so that ``nbytes`` can be reserved."""
        short = nbytes - self.tier.free
        if short <= 0:
            return []
        return self.evict(short, agent_distances)

    # -- reservations and loading ---------------------------------------------
    def missing(self, objs: Iterable[MemoryObject]) -> list[MemoryObject]:
        return [o for o in objs if o.residency is not Residency.DEVICE]

    def reservation_needed(self, objs: Iterable[MemoryObject]) -> int:
        """Bytes still to reserve for ``objs`` (claimed or reserved objects excluded)."""
        return sum(o.size - o.loaded_bytes for o in objs
                   if o.residency is not Residency.DEVICE and o.claimed_by is None and not o.reserved)

    def reserve(self, objs: Iterable[MemoryObject]) -> None:
        objs = [o for o in objs if o.residency is not Residency.DEVICE and o.claimed_by is None and not o.reserved]
        total = sum(o.size - o.loaded_bytes for o in objs)
        self.tier.reserve(total)
        for o in objs:
            o.reserved = o.size - o.loaded_bytes

    def materialize(self, obj: MemoryObject) -> None:
        """Recompute an absent object on device (its reservation becomes allocation)."""
        if obj.residency is not Residency.ABSENT:
            raise RuntimeError(f"{obj} is not absent")
        if obj.reserved != obj.size:
            raise InvariantViolation(f"{obj} recomputed without a reservation")
        self.tier.commit(obj.size)
        obj.reserved = 0
        obj.move(Residency.DEVICE)
        self.tier.resident_set.add(obj.id)

    def unreserve(self, obj: MemoryObject) -> None:
        if obj.reserved:
            self.tier.release(obj.reserved)
            obj.reserved = 0

    def load(self, objects: Sequence[MemoryObject], agent_ids, preemption_probe: Callable[[], bool]):
        """Generator moving ``objects`` host-to-device one chunk at a time.

        Yields ``(obj, nbytes, duration)`` before each chunk; the driver resumes
        it once the chunk's duration has elapsed. ``preemption_probe`` is
        consulted between chunks. Returns True when every object is resident
        and False when aborted; partially loaded chunks are kept.
        """
        todo = [o for o in objects if o.residency is not Residency.DEVICE]
        for obj in todo:
            if obj.residency is Residency.ABSENT:
                raise NotRestorable(f"object {obj.id} has no host copy")
        for k, obj in enumerate(todo):
            if obj.residency is Residency.HOST:
                obj.move(Residency.LOADING)
            while obj.loaded_bytes < obj.size:
                nbytes = min(self.cost.chunk_size, obj.size - obj.loaded_bytes)
                yield obj, nbytes, self.cost.chunk_time(nbytes, first=obj.loaded_bytes == 0)
                obj.loaded_bytes += nbytes
                obj.loaded_chunks += 1
                obj.reserved -= nbytes
                self.tier.commit(nbytes)
                self.transferred_bytes += nbytes
                if obj.loaded_bytes == obj.size:
                    obj.move(Residency.DEVICE)
                    obj.claimed_by = None
                    obj.last_use = self.now()
                    self.tier.resident_set.add(obj.id)
                more = obj.loaded_bytes < obj.size or k + 1 < len(todo)
                if more and preemption_probe():
                    return False
        return True

    def release_task(self, task: LoadTask) -> None:
        """Undo a cancelled task: free its reservations and partial chunks."""
        for obj in task.objects:
            if obj.claimed_by != task.task_id:
                continue
            self.unreserve(obj)
            if obj.residency is Residency.LOADING:
                self.tier.drop(obj.loaded_bytes)
                obj.loaded_bytes = 0
                obj.loaded_chunks = 0
                obj.move(Residency.HOST)
            obj.claimed_by = None

    def claim(self, task: LoadTask, objs: Iterable[MemoryObject]) -> None:
        for o in objs:
            if o.claimed_by is None:
                o.claimed_by = task.task_id

    # -- prefetch -----------------------------------------------------------
    def _restorable(self, agent_id: int) -> list[MemoryObject]:
        return [self.objects[i] for i in sorted(self.agent_refs.get(agent_id, ()))
                if self.objects[i].residency in (Residency.HOST, Residency.LOADING)
                and self.objects[i].claimed_by is None]

    def _exclusive_resident(self, agent_id: int) -> list[MemoryObject]:
        return [self.objects[i] for i in sorted(self.agent_refs.get(agent_id, ()))
                if self.objects[i].resident and i not in self.pins
                and self.objects[i].referencing_agents == {agent_id}]

    def dispatch_load_tasks(self, agent_distances: Mapping[int, object], threshold, budget=None,
                            modules=None, agents: Optional[Iterable[int]] = None) -> list[LoadTask]:
        """Plan and submit prefetch tasks for agents whose distance is below ``threshold``.

        Priority of each task is the agent's distance.
        """
        names = None if modules is None else {m.name for m in modules}
        active = self.active_agents
        pool = sorted(self.agents if agents is None else agents)
        offloaded, footprint, resident, reclaim = {}, {}, {}, {}
        for a in pool:
            if a in active:
                continue
            task = self.scheduler.by_agent.get(a)
            d = agent_distances[a]
            if d < threshold and (task is None or not task.live):
                objs = [o for o in self._restorable(a) if names is None or o.module in names]
                need = sum(o.size - o.loaded_bytes for o in objs)
                if need:
                    offloaded[a] = d
                    footprint[a] = need
            excl = [o for o in self._exclusive_resident(a) if names is None or o.module in names]
            if excl and (task is None or not task.live):
                resident[a] = d
                reclaim[a] = sum(o.size for o in excl)
        plan = plan_prefetch(offloaded, resident, self.tier.free, threshold, footprint, reclaim, budget)
        submitted = []
        for decision in plan:
            for v in decision.victims:
                victims = self._exclusive_resident(v)
                blocked = self._blocked(victims)
                order, _ = select_victims(victims, sum(o.size for o in victims), self.eviction.kind, blocked)
                self.evict_objects(order)
            objs = [o for o in self._restorable(decision.agent) if names is None or o.module in names]
            try:
                self.reserve(objs)
            except InsufficientMemory:
                continue
            task = self.scheduler.new_task(decision.agent, objs, agent_distances[decision.agent])
            self.claim(task, objs)
            submitted.append(self.scheduler.submit(task))
        return submitted

    # -- checks ---------------------------------------------------------------
    def check_invariants(self, agent_distances: Optional[Mapping[int, object]] = None) -> None:
        t = self.tier
        if t.used > t.capacity or t.used + t.reserved > t.capacity:
            raise InvariantViolation(f"capacity exceeded: used={t.used} reserved={t.reserved} cap={t.capacity}")
        used = sum(o.size for o in self.objects.values() if o.resident)
        used += sum(o.loaded_bytes for o in self.objects.values() if o.residency is Residency.LOADING)
        if used != t.used:
            raise InvariantViolation(f"used bytes drift: tracked {t.used}, actual {used}")
        reserved = sum(o.reserved for o in self.objects.values())
        if reserved != t.reserved:
            raise InvariantViolation(f"reserved bytes drift: tracked {t.reserved}, actual {reserved}")
        for o in self.objects.values():
            if o.residency is Residency.ABSENT and o.backed_on_host and o.transitions:
                raise InvariantViolation(f"host-backed object {o.id} became absent")
            if o.id in self.pins and o.residency is not Residency.DEVICE and o.claimed_by is None and not o.reserved:
                raise InvariantViolation(f"pinned object {o.id} neither resident nor on its way")
        if agent_distances is not None:
            for o in self.objects.values():
                expect = min((agent_distances[a] for a in o.referencing_agents), default=math.inf)
                if o.derived_distance != expect:
                    raise InvariantViolation(f"object {o.id} distance {o.derived_distance} != min {expect}")


class TransferChannel:
    """Single host-to-device link executing scheduler tasks chunk by chunk."""

    def __init__(self, engine: Engine, manager: MemoryManager,
                 on_object_loaded: Optional[Callable[[MemoryObject], None]] = None,
                 on_task_done: Optional[Callable[[LoadTask], None]] = None):
        self.engine = engine
        self.manager = manager
        self.scheduler = manager.scheduler
        self.on_object_loaded = on_object_loaded
        self.on_task_done = on_task_done
        self._gen = None
        self._pending = None
        self.busy_time = Fraction(0)
        self._chunk_end = Fraction(0)
        engine.on(EventKind.TRANSFER_CHUNK_DONE, self._chunk_done)

    @property
    def busy(self) -> bool:
        return self.scheduler.executing is not None

    def busy_until(self, now: Fraction) -> Fraction:
        """Transfer time spent on the channel up to ``now``."""
        return self.busy_time - max(Fraction(0), self._chunk_end - now)

    def kick(self) -> None:
        while self.scheduler.executing is None:
            task = self.scheduler.pop_next()
            if task is None:
                return
            self._gen = self._start(task)
            self._advance(task, None)

    @staticmethod
    def _remaining(task: LoadTask) -> list:
        # objects loaded earlier may have been evicted again; those are no longer the task's
        return [o for o in task.objects if not o.resident and o.claimed_by == task.task_id]

    def _start(self, task: LoadTask):
        probe = lambda: self.scheduler.should_preempt(task)
        return self.manager.load(self._remaining(task), [task.agent], probe)

    def _advance(self, task: LoadTask, applied) -> None:
        try:
            obj, nbytes, dur = next(self._gen)
        except StopIteration as stop:
            self._gen = None
            if applied is not None and applied.resident and self.on_object_loaded:
                self.on_object_loaded(applied)
            if stop.value and self._remaining(task):
                # objects were coalesced into the task while it ran
                if self.scheduler.should_preempt(task):
                    self.scheduler.requeue(task)
                else:
                    self._gen = self._start(task)
                    self._advance(task, None)
                return
            if stop.value:
                self.scheduler.finish(task)
                if self.on_task_done:
                    self.on_task_done(task)
            else:
                self.scheduler.requeue(task)
            return
        if applied is not None and applied.resident and applied is not obj and self.on_object_loaded:
            self.on_object_loaded(applied)
        self._pending = obj
        self.busy_time += dur
        self._chunk_end = self.engine.clock + dur
        self.engine.after(dur, EventKind.TRANSFER_CHUNK_DONE, task.task_id, obj.id, nbytes)

    def _chunk_done(self, event) -> None:
        task = self.scheduler.executing
        task_id, obj_id, nbytes = event.payload
        assert task is not None and task.task_id == task_id
        task.bytes_moved += nbytes
        self._advance(task, self._pending)
        self.kick()
