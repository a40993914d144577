import math
from fractions import Fraction

import networkx as nx
import numpy as np
import pytest

from idmem.engine import INF, Agent, CostModel, Phase
from idmem.workload import (DiffusionGraph, SpatialState, WorkloadConfig, bfs_hops, estimate_distance,
                            gen_diffusion, gen_independent, gen_interaction, read_edge_list)

from helpers import issue_times, simulate

TINY = dict(fresh_tokens=0, output_tokens=1, shared_prefix_tokens=0, private_prefix_tokens=0)


def test_config_validation():
    with pytest.raises(ValueError):
        WorkloadConfig(n_agents=0)
    with pytest.raises(ValueError):
        WorkloadConfig(target_active_rate=0)
    with pytest.raises(ValueError):
        WorkloadConfig(target_active_rate=1.5)
    with pytest.raises(ValueError):
        WorkloadConfig(category="chat")
    with pytest.raises(ValueError):
        WorkloadConfig(n_agents=2, start_offsets=[0])


def test_independent_staggered_fixed_actions():
    wc = WorkloadConfig(n_agents=3, steps=2, action_duration=10, start_offsets=[0, 4, 8], **TINY)
    sim = simulate(wc)
    sim.run_until()
    issues = issue_times(sim)
    assert [issues[a][0] for a in range(3)] == [0, 4, 8]
    for a in range(3):
        first = next(r for r in sim.records if r.agent == a and r.t_issue == issues[a][0])
        assert issues[a][1] == first.t_done + 10


def test_independent_active_rate_near_target():
    wc = WorkloadConfig(n_agents=1000, steps=6, target_active_rate=0.2, seed=1,
                        shared_prefix_tokens=16, private_prefix_tokens=16)
    sim = simulate(wc, cost=CostModel(), check=False, record_trace=False)
    rep = sim.run_until()
    # steady-state window, away from the staggered start and the drain at the end
    lo, hi = rep.makespan / 4, 3 * rep.makespan / 4
    active = sum(max(0.0, min(float(r.t_done), hi) - max(float(r.t_issue), lo)) for r in sim.records)
    assert 0.15 <= active / (wc.n_agents * (hi - lo)) <= 0.25


def test_single_agent_distance_is_remaining_action():
    wc = WorkloadConfig(n_agents=1, steps=3, action_duration=20, start_offsets=[0], **TINY)
    sim = simulate(wc, prefetch="distance", threshold=0, poll=1)
    seen = []

    def probe(event):
        a = sim.agents[0]
        d = sim.distance(0)
        if a.phase is Phase.ACTING and a.action_end is not None:
            seen.append(d)
            assert d == a.action_end - sim.engine.clock
        elif a.active:
            assert d == 0

    sim.engine.hooks.append(probe)
    sim.run_until()
    assert len(sim.records) == 3
    assert seen and max(seen) <= 20


def test_independent_distance_matches_next_issue_time():
    rng = np.random.default_rng(5)
    wc = WorkloadConfig(n_agents=6, steps=4, action_duration=(5, 40), seed=5,
                        start_offsets=[int(x) for x in rng.integers(0, 30, 6)], **TINY)
    sim = simulate(wc, prefetch="distance", threshold=0, poll=3)
    snapshots = []
    sim.engine.hooks.append(lambda ev: snapshots.append(
        (sim.engine.clock, {a: sim.distance(a) for a in sim.agents})) if ev.kind.value == "PrefetchPoll" else None)
    sim.run_until()
    issues = issue_times(sim)
    for now, dist in snapshots:
        for a, d in dist.items():
            if d == 0 or d == INF:
                continue
            nxt = min(t for t in issues[a] if t >= now)
            assert nxt - now == d


def test_interaction_kinematics_trigger_time():
    wc = WorkloadConfig(category="interaction", n_agents=2, steps=2, action_duration=50, start_offsets=[100, 100],
                        positions=[[20, 50], [32, 50]], velocities=[[1.5, 0], [-1.5, 0]],
                        interaction_threshold=0, step_length=1, **TINY)
    sim = simulate(wc)
    sim.run_until()
    assert issue_times(sim)[0][0] == 4 and issue_times(sim)[1][0] == 4
    kinds = [k for t, k, p in sim.engine.trace if t == 4]
    assert "InteractionTriggered" in kinds


def test_interaction_distance_is_min_of_action_and_contact():
    wc = WorkloadConfig(category="interaction", n_agents=2, steps=2, action_duration=50, start_offsets=[10, 100],
                        positions=[[20, 50], [32, 50]], velocities=[[1.5, 0], [-1.5, 0]], **TINY)
    world = gen_interaction(wc)
    world.refresh_interaction(Fraction(0))
    # action ends at 10, contact (gap 12, closing speed 3) in 4
    assert estimate_distance(world.agents[0], world, Fraction(0)) == 4
    world.spatial.velocity[:] = [[-1.5, 0], [1.5, 0]]
    world.refresh_interaction(Fraction(0))
    assert estimate_distance(world.agents[0], world, Fraction(0)) == 10


def test_interaction_with_zero_velocity_matches_independent():
    common = dict(n_agents=5, steps=3, action_duration=(5, 25), start_offsets=[0, 3, 6, 9, 12], seed=4, **TINY)
    ind = simulate(WorkloadConfig(category="independent", **common))
    ind.run_until()
    inter = simulate(WorkloadConfig(category="interaction", velocities=[[0, 0]] * 5,
                                    positions=[[10 * i, 0] for i in range(5)], **common))
    inter.run_until()
    assert issue_times(ind) == issue_times(inter)


def test_triggered_interaction_suppresses_scheduled_action_end():
    wc = WorkloadConfig(category="interaction", n_agents=2, steps=2, action_duration=50, start_offsets=[100, 100],
                        positions=[[20, 50], [32, 50]], velocities=[[1.5, 0], [-1.5, 0]],
                        interaction_threshold=1, step_length=1, **TINY)
    sim = simulate(wc)
    sim.run_until()
    first_calls = [t for t, k, p in sim.engine.trace if k == "AgentRequestIssued" or k == "InteractionTriggered"]
    assert first_calls and first_calls[0] < 100
    # the ActionFinished events scheduled for t=100 never fired
    assert not [t for t, k, p in sim.engine.trace if k == "ActionFinished" and t == 100]


def test_interaction_dominance_over_action_distance():
    wc = WorkloadConfig(category="interaction", n_agents=30, steps=3, seed=2, arena_size=30, max_speed=0.5,
                        action_duration=(10, 60), **TINY)
    sim = simulate(wc, prefetch="distance", threshold=5, poll=2)

    def probe(ev):
        if ev.kind.value != "PrefetchPoll":
            return
        for a in sim.agents.values():
            if a.phase is Phase.ACTING and a.action_end is not None:
                assert sim.distance(a.id) <= a.action_end - sim.engine.clock

    sim.engine.hooks.append(probe)
    sim.run_until()
    assert len(sim.records) == 90


def test_spatial_reflecting_walls_stay_in_arena():
    s = SpatialState(np.array([[1.0, 1.0]]), np.array([[3.0, -2.0]]), 1.0, 10.0)
    for t in range(1, 40):
        s.advance(Fraction(t))
        assert (0 <= s.position).all() and (s.position <= 10).all()


def _diffusion(n, edges, sources, delay=5):
    wc = WorkloadConfig(category="diffusion", n_agents=n, sources=sources, propagation_delay=delay, **TINY)
    world = gen_diffusion(wc, DiffusionGraph.from_edges(n, edges, sources))
    return simulate(wc, world=world)


def test_diffusion_path_activation_order():
    sim = _diffusion(3, [(0, 1), (1, 2)], [0])
    sim.run_until()
    order = [r.agent for r in sorted(sim.records, key=lambda r: r.t_issue)]
    assert order == [0, 1, 2]
    assert all(a.phase is Phase.IDLE for a in sim.agents.values())


def test_diffusion_star_leaves_activate_together():
    sim = _diffusion(6, [(0, i) for i in range(1, 6)], [0])
    sim.run_until()
    centre = next(r for r in sim.records if r.agent == 0)
    leaves = {r.t_issue for r in sim.records if r.agent != 0}
    assert leaves == {centre.t_done + 5}


def test_diffusion_random_graph_respects_bfs_levels():
    g = nx.gnp_random_graph(50, 0.08, seed=11)
    edges = list(g.edges())
    sim = _diffusion(50, edges, [0])
    sim.run_until()
    hops = nx.single_source_shortest_path_length(g, 0)
    t = {r.agent: r.t_issue for r in sim.records}
    assert set(t) == set(hops)
    for a in t:
        for b in t:
            if hops[a] < hops[b]:
                assert t[a] <= t[b]


def test_diffusion_distances_are_hop_counts():
    wc = WorkloadConfig(category="diffusion", n_agents=4, sources=[0], **TINY)
    world = gen_diffusion(wc, DiffusionGraph.from_edges(4, [(0, 1), (1, 2)], [0]))
    world.activated.add(0)
    d = {a.id: estimate_distance(a, world, Fraction(0)) for a in world.agents}
    assert d == {0: INF, 1: 1, 2: 2, 3: INF}


def test_generating_agent_distance_is_zero():
    wc = WorkloadConfig(n_agents=1, **TINY)
    world = gen_independent(wc)
    a = world.agents[0]
    a.phase = Phase.GENERATING
    assert estimate_distance(a, world, Fraction(0)) == 0


def test_diffusion_requires_sources(tmp_path):
    with pytest.raises(ValueError):
        DiffusionGraph.from_edges(3, [(0, 1)], [])
    p = tmp_path / "g.txt"
    p.write_text("# edges\n0 1\n\n1 2\n")
    assert read_edge_list(p) == [(0, 1), (1, 2)]
    p.write_text("0 1 2\n")
    with pytest.raises(ValueError):
        read_edge_list(p)


def test_bfs_hops_unreachable_is_infinite():
    assert bfs_hops({0: [1], 1: [0], 2: []}, [0]) == {0: 0, 1: 1, 2: math.inf}


def test_distance_noise_perturbs_estimate_only():
    wc = WorkloadConfig(n_agents=4, steps=3, action_duration=20, start_offsets=[0, 1, 2, 3], distance_noise=0.5,
                        **TINY)
    sim = simulate(wc)
    sim.run_until()
    for a, ts in issue_times(sim).items():
        recs = sorted((r for r in sim.records if r.agent == a), key=lambda r: r.t_issue)
        assert all(b.t_issue == x.t_done + 20 for x, b in zip(recs, recs[1:]))
    assert Agent(0).distance == INF
