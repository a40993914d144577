"""Synthetic agent populations and invocation-distance estimators.

Three activation patterns are generated:

* ``independent`` - agents alternate LLM calls and actions of known length;
* ``interaction`` - same loop, but agents move in a square arena and two
  acting agents that come within ``interaction_threshold`` both stop and
  call the LLM;
* ``diffusion`` - agents are idle until a neighbour passes a message along
  a graph, call the LLM once, then forward the message.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import INF, Agent, CostModel, Phase, as_time
from .memory import Request

CATEGORIES = ("independent", "interaction", "diffusion")


@dataclass
class WorkloadConfig:
    category: str = "independent"
    n_agents: int = 10
    seed: int = 0
    # LLM calls per agent; diffusion agents call exactly once
    steps: int = 5
    # (min, max) action length in ticks; None derives it from target_active_rate
    action_duration: Optional[tuple] = None
    target_active_rate: float = 0.2
    start_offsets: Optional[list] = None
    # explicit per-agent action lengths: action_plan[i][k] follows agent i's (k+1)-th call
    action_plan: Optional[list] = None
    fresh_tokens: tuple = (128, 128)
    output_tokens: tuple = (64, 64)
    shared_prefix_tokens: int = 256
    private_prefix_tokens: int = 1024
    step_length: int = 10
    # multiplicative noise on the action length reported to the estimator
    distance_noise: float = 0.0
    # interaction
    arena_size: float = 100.0
    max_speed: float = 1.0
    interaction_threshold: float = 2.0
    cooldown: Optional[int] = None
    positions: Optional[list] = None
    velocities: Optional[list] = None
    # diffusion
    graph_path: Optional[str] = None
    graph_degree: int = 4
    graph_rewire: float = 0.1
    sources: list = field(default_factory=lambda: [0])
    propagation_delay: int = 5

    def __post_init__(self):
        self.fresh_tokens = _pair(self.fresh_tokens)
        self.output_tokens = _pair(self.output_tokens)
        if self.action_duration is not None:
            self.action_duration = _pair(self.action_duration)
        self.validate()

    def validate(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}, got {self.category!r}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not 0 < self.target_active_rate <= 1:
            raise ValueError("target_active_rate must be in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_length <= 0:
            raise ValueError("step_length must be > 0")
        if self.interaction_threshold < 0 or self.max_speed < 0:
            raise ValueError("interaction_threshold and max_speed must be >= 0")
        if self.action_duration is not None and (self.action_duration[0] < 0
                                                 or self.action_duration[0] > self.action_duration[1]):
            raise ValueError("action_duration must be 0 <= min <= max")
        if self.start_offsets is not None and len(self.start_offsets) != self.n_agents:
            raise ValueError("start_offsets needs one entry per agent")
        if self.action_plan is not None:
            if len(self.action_plan) != self.n_agents:
                raise ValueError("action_plan needs one list per agent")
            for plan in self.action_plan:
                if len(plan) < self.steps - 1 or any(d < 0 for d in plan):
                    raise ValueError(f"action_plan entries need {self.steps - 1} non-negative durations")


def _pair(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    lo, hi = v
    return (int(lo), int(hi))


@dataclass
class SpatialState:
    """Positions and velocities of all agents in a square arena with reflecting walls."""

    position: np.ndarray
    velocity: np.ndarray
    interaction_threshold: float
    arena_size: float
    updated_at: Fraction = Fraction(0)

    def __post_init__(self):
        if self.interaction_threshold < 0:
            raise ValueError("interaction_threshold must be >= 0")

    def advance(self, now: Fraction) -> None:
        dt = float(now - self.updated_at)
        if dt <= 0:
            return
        raw = self.position + self.velocity * dt
        size = self.arena_size
        if size <= 0:
            return
        # unfold the reflecting box into a 2*size periodic line
        m = np.mod(raw, 2 * size)
        p = np.where(m > size, 2 * size - m, m)
        bounces = np.floor_divide(raw, size)
        self.velocity = np.where(np.mod(bounces, 2) == 1, -self.velocity, self.velocity)
        self.position = p
        self.updated_at = now

    def at(self, now: Fraction) -> np.ndarray:
        """Positions extrapolated to ``now`` along current velocities (walls ignored)."""
        return self.position + self.velocity * float(now - self.updated_at)


@dataclass
class DiffusionGraph:
    nodes: list
    adjacency: dict
    sources: list

    def __post_init__(self):
        if not self.sources:
            raise ValueError("diffusion graph needs at least one source")
        missing = set(self.sources) - set(self.nodes)
        if missing:
            raise ValueError(f"sources {sorted(missing)} are not graph nodes")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple], sources: Sequence[int]) -> "DiffusionGraph":
        adj = {i: set() for i in range(n)}
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) references a node outside 0..{n - 1}")
            if u != v:
                adj[u].add(v)
                adj[v].add(u)
        return cls(list(range(n)), {k: sorted(v) for k, v in adj.items()}, list(sources))


def read_edge_list(path) -> list[tuple[int, int]]:
    """Parse ``u v`` pairs, one per line; blank lines and ``#`` comments are skipped."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        u, v = (int(x) for x in parts)
        if u < 0 or v < 0:
            raise ValueError(f"{path}:{lineno}: node ids must be non-negative")
        edges.append((u, v))
    return edges


def bfs_hops(adjacency: dict, sources: Iterable[int]) -> dict:
    """Multi-source hop counts; unreachable nodes get +inf."""
    hops = {n: INF for n in adjacency}
    queue = deque()
    for s in sorted(set(sources)):
        hops[s] = 0
        queue.append(s)
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if hops[v] == INF:
                hops[v] = hops[u] + 1
                queue.append(v)
    return hops


@dataclass(eq=False)
class World:
    """Agent population plus the workload-specific state the simulator drives."""

    config: WorkloadConfig
    cost: CostModel
    agents: list
    action_range: tuple
    start_times: dict
    spatial: Optional[SpatialState] = None
    graph: Optional[DiffusionGraph] = None
    rngs: dict = field(default_factory=dict)
    interaction_eta: dict = field(default_factory=dict)
    pair_cooldown: dict = field(default_factory=dict)
    activated: set = field(default_factory=set)
    _hops: Optional[dict] = None

    @property
    def category(self) -> str:
        return self.config.category

    @property
    def mean_action(self) -> float:
        return sum(self.action_range) / 2

    @property
    def cooldown(self) -> Fraction:
        c = self.config.cooldown
        return as_time(c if c is not None else max(1, round(self.mean_action)))

    def draw_action(self, agent: Agent) -> int:
        """Length of the action that follows the agent's latest call."""
        if self.config.action_plan is not None:
            return int(self.config.action_plan[agent.id][agent.calls_done - 1])
        lo, hi = self.action_range
        return int(self.rngs["action"].integers(lo, hi + 1))

    def noisy(self, duration: int) -> Fraction:
        eps = self.config.distance_noise
        if not eps:
            return Fraction(duration)
        factor = 1.0 + float(self.rngs["noise"].uniform(-eps, eps))
        return as_time(round(max(0.0, duration * factor), 6))

    def prefix_tokens(self, agent_id: int) -> tuple:
        c = self.config
        shared = tuple(range(c.shared_prefix_tokens))
        base = (agent_id + 1) * 1_000_000
        return shared + tuple(range(base, base + c.private_prefix_tokens))

    def request_for(self, agent: Agent) -> Request:
        rng = self.rngs["tokens"]
        lo, hi = self.config.fresh_tokens
        fresh = int(rng.integers(lo, hi + 1))
        lo, hi = self.config.output_tokens
        out = int(rng.integers(lo, hi + 1))
        return Request(agent.id, self.prefix_tokens(agent.id), fresh, out)

    # -- interaction --------------------------------------------------------
    def contacts(self, now: Fraction) -> list[tuple[int, int]]:
        """Pairs of acting agents within the interaction threshold, cooldown permitting."""
        from scipy.spatial import cKDTree

        acting = [a.id for a in self.agents if a.phase is Phase.ACTING]
        if len(acting) < 2:
            return []
        pts = self.spatial.position[acting]
        pairs = sorted(cKDTree(pts).query_pairs(self.spatial.interaction_threshold))
        out, used = [], set()
        for i, j in pairs:
            a, b = acting[i], acting[j]
            if a in used or b in used:
                continue
            if self.pair_cooldown.get((a, b), -INF) > now:
                continue
            used.update((a, b))
            out.append((a, b))
        return out

    def refresh_interaction(self, now: Fraction) -> None:
        """Recompute, for every acting agent, the earliest approach-based contact time."""
        self.interaction_eta = {}
        acting = np.array([a.id for a in self.agents if a.phase is Phase.ACTING], dtype=int)
        if len(acting) < 2:
            return
        p = self.spatial.at(now)[acting]
        v = self.spatial.velocity[acting]
        dp = p[None, :, :] - p[:, None, :]
        dv = v[None, :, :] - v[:, None, :]
        gap = np.sqrt((dp ** 2).sum(-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            closing = -(dp * dv).sum(-1) / gap
            eta = np.where(closing > 0, gap / closing, np.inf)
        eta[gap == 0] = 0.0
        np.fill_diagonal(eta, np.inf)
        best = eta.min(axis=1)
        for aid, t in zip(acting.tolist(), best.tolist()):
            self.interaction_eta[aid] = now + as_time(round(t, 6)) if math.isfinite(t) else INF

    # -- diffusion ----------------------------------------------------------
    def invalidate_hops(self) -> None:
        self._hops = None

    def hops(self) -> dict:
        if self._hops is None:
            informed = self.activated or set(self.graph.sources)
            self._hops = bfs_hops(self.graph.adjacency, informed)
        return self._hops


def _rngs(seed: int) -> dict:
    names = ("action", "offset", "tokens", "space", "noise", "graph")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def nominal_generation_time(config: WorkloadConfig, cost: CostModel) -> Fraction:
    """Prefill of the fresh tokens plus decode, assuming a cached prefix."""
    fresh = Fraction(sum(config.fresh_tokens), 2)
    out = Fraction(sum(config.output_tokens), 2)
    return cost.prefill_per_token * fresh + cost.decode_per_token * out


def action_range_for(config: WorkloadConfig, cost: CostModel) -> tuple[int, int]:
    if config.action_duration is not None:
        return config.action_duration
    r = config.target_active_rate
    mean = nominal_generation_time(config, cost) * Fraction(1 - r).limit_denominator(10**6) / Fraction(r).limit_denominator(10**6)
    return (max(1, round(mean / 2)), max(1, round(mean * 3 / 2)))


def _population(config: WorkloadConfig, cost: CostModel, rngs: dict) -> tuple[list, tuple, dict]:
    act = action_range_for(config, cost)
    agents = [Agent(i) for i in range(config.n_agents)]
    if config.start_offsets is not None:
        starts = {i: as_time(t) for i, t in enumerate(config.start_offsets)}
    else:
        cycle = max(1, round(sum(act) / 2 + nominal_generation_time(config, cost)))
        offs = rngs["offset"].integers(0, cycle, size=config.n_agents)
        starts = {i: Fraction(int(t)) for i, t in enumerate(offs)}
    for a in agents:
        # every agent starts in the middle of an action that ends at its start time
        a.phase = Phase.ACTING
        a.action_end = starts[a.id]
        a.workload_state["est_end"] = starts[a.id]
        a.workload_state["token"] = 0
    return agents, act, starts


def gen_independent(config: WorkloadConfig, cost: CostModel = CostModel()) -> World:
    if config.category != "independent":
        raise ValueError("gen_independent needs category='independent'")
    rngs = _rngs(config.seed)
    agents, act, starts = _population(config, cost, rngs)
    return World(config, cost, agents, act, starts, rngs=rngs)


def gen_interaction(config: WorkloadConfig, cost: CostModel = CostModel()) -> World:
    if config.category != "interaction":
        raise ValueError("gen_interaction needs category='interaction'")
    rngs = _rngs(config.seed)
    agents, act, starts = _population(config, cost, rngs)
    n, size = config.n_agents, config.arena_size
    if config.positions is not None:
        pos = np.asarray(config.positions, dtype=float).reshape(n, 2)
    else:
        pos = rngs["space"].uniform(0, size, size=(n, 2))
    if config.velocities is not None:
        vel = np.asarray(config.velocities, dtype=float).reshape(n, 2)
    else:
        angle = rngs["space"].uniform(0, 2 * np.pi, size=n)
        speed = rngs["space"].uniform(0, config.max_speed, size=n)
        vel = np.stack([np.cos(angle) * speed, np.sin(angle) * speed], axis=1)
    spatial = SpatialState(pos, vel, config.interaction_threshold, size)
    return World(config, cost, agents, act, starts, spatial=spatial, rngs=rngs)


def random_graph(n: int, degree: int, rewire: float, seed: int) -> list[tuple[int, int]]:
    import networkx as nx

    if n <= degree:
        return [(u, v) for u in range(n) for v in range(u + 1, n)]
    g = nx.connected_watts_strogatz_graph(n, max(2, degree), rewire, seed=seed)
    return sorted(tuple(sorted(e)) for e in g.edges())


def gen_diffusion(config: WorkloadConfig, graph: Optional[DiffusionGraph] = None,
                  cost: CostModel = CostModel()) -> World:
    if config.category != "diffusion":
        raise ValueError("gen_diffusion needs category='diffusion'")
    if graph is None:
        if config.graph_path:
            edges = read_edge_list(config.graph_path)
        else:
            edges = random_graph(config.n_agents, config.graph_degree, config.graph_rewire, config.seed)
        graph = DiffusionGraph.from_edges(config.n_agents, edges, config.sources)
    if len(graph.nodes) != config.n_agents:
        raise ValueError("graph size must equal n_agents")
    rngs = _rngs(config.seed)
    agents = [Agent(i, phase=Phase.IDLE) for i in range(config.n_agents)]
    starts = {s: Fraction(0) for s in sorted(set(graph.sources))}
    return World(config, cost, agents, (0, 0), starts, graph=graph, rngs=rngs)


def generate(config: WorkloadConfig, cost: CostModel = CostModel()) -> World:
    if config.category == "independent":
        return gen_independent(config, cost)
    if config.category == "interaction":
        return gen_interaction(config, cost)
    return gen_diffusion(config, cost=cost)


def estimate_distance(agent: Agent, world: World, now: Fraction):
    """Invocation distance of ``agent`` at time ``now``.

    Active agents are at 0. Independent agents report the remaining action
    time; interaction agents the smaller of that and the time to the nearest
    approaching agent; diffusion agents their hop count from the informed
    set, with +inf once they have been activated.
    """
    if agent.active:
        return 0
    if world.category == "diffusion":
        if agent.id in world.activated:
            return INF
        return world.hops()[agent.id]
    if agent.phase is not Phase.ACTING or agent.action_end is None:
        return INF
    d_action = max(Fraction(0), agent.workload_state.get("est_end", agent.action_end) - now)
    if world.category == "interaction":
        eta = world.interaction_eta.get(agent.id, INF)
        if eta != INF:
            return min(d_action, max(Fraction(0), eta - now))
    return d_action
