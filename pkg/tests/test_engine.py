from fractions import Fraction

import pytest

from idmem.engine import Agent, CausalityError, CostModel, Engine, EventKind, Phase, as_time

from helpers import MiB, scripted, tiny_cost


def test_as_time_is_exact():
    assert as_time(0.02) == Fraction(1, 50)
    assert as_time("3/10") == Fraction(3, 10)
    assert as_time(7) == Fraction(7)
    with pytest.raises(TypeError):
        as_time(True)
    with pytest.raises(ValueError):
        as_time(float("inf"))


def test_events_run_in_time_then_insertion_order():
    e = Engine()
    seen = []
    e.on(EventKind.ACTION_FINISHED, lambda ev: seen.append(ev.payload[0]))
    e.at(5, EventKind.ACTION_FINISHED, "late")
    e.at(1, EventKind.ACTION_FINISHED, "a")
    e.at(1, EventKind.ACTION_FINISHED, "b")
    e.at(3, EventKind.ACTION_FINISHED, "mid")
    assert e.run() == 4
    assert seen == ["a", "b", "mid", "late"]
    assert e.clock == 5


def test_scheduling_in_the_past_raises():
    e = Engine()
    e.on(EventKind.ACTION_FINISHED, lambda ev: None)
    e.at(10, EventKind.ACTION_FINISHED)
    e.run()
    with pytest.raises(CausalityError):
        e.at(9, EventKind.ACTION_FINISHED)
    # same instant is fine
    e.at(10, EventKind.ACTION_FINISHED)


def test_cancelled_events_are_skipped():
    e = Engine()
    seen = []
    e.on(EventKind.ACTION_FINISHED, lambda ev: seen.append(ev.payload[0]))
    keep = e.at(1, EventKind.ACTION_FINISHED, 1)
    drop = e.at(2, EventKind.ACTION_FINISHED, 2)
    e.cancel(drop)
    assert len(e) == 1
    e.run()
    assert seen == [1] and keep.sequence >= 0


def test_run_respects_limit_and_stop():
    e = Engine()
    seen = []

    def handler(ev):
        seen.append(ev.time)
        if ev.time == 4:
            e.stop()

    e.on(EventKind.ACTION_FINISHED, handler)
    for t in (1, 2, 4, 8):
        e.at(t, EventKind.ACTION_FINISHED)
    e.run(limit=2)
    assert seen == [1, 2]
    e.run()
    assert seen == [1, 2, 4]


def test_trace_records_processed_events():
    e = Engine(record_trace=True)
    e.at(3, EventKind.PREFETCH_POLL)
    e.run()
    assert e.trace == [(Fraction(3), "PrefetchPoll", ())]


def test_cost_model_linear_terms():
    c = CostModel(prefill_per_token=Fraction(1, 50), decode_per_token=Fraction(3, 10),
                  transfer_bandwidth=64 * MiB, transfer_latency=Fraction(1, 2))
    assert c.prefill_time(1000) == 20
    assert c.prefill_time(1000, cached_tokens=600) == 8
    assert c.decode_time(10) == 3
    assert c.transfer_time(128 * MiB) == Fraction(5, 2)
    assert c.transfer_time(0) == Fraction(1, 2)
    with pytest.raises(ValueError):
        c.prefill_time(10, cached_tokens=11)


def test_cost_model_chunking():
    c = CostModel(chunk_size=16 * MiB)
    assert c.chunks(64 * MiB) == [16 * MiB] * 4
    assert c.chunks(40 * MiB) == [16 * MiB, 16 * MiB, 8 * MiB]
    with pytest.raises(ValueError):
        CostModel(decode_per_token=0)
    with pytest.raises(ValueError):
        CostModel(chunk_size=0)


def test_agent_phase_machine():
    a = Agent(0)
    a.transition(Phase.WAITING_FOR_MEMORY)
    a.transition(Phase.GENERATING)
    a.transition(Phase.ACTING)
    with pytest.raises(RuntimeError):
        a.transition(Phase.ACTING)
    a.transition(Phase.IDLE)


def test_single_agent_makespan_is_compute_when_memory_fits():
    cost = CostModel(prefill_per_token=Fraction(1, 10), decode_per_token=Fraction(1), transfer_bandwidth=MiB)
    sim = scripted(1, 1, [0], [[]], slots=1, cost=cost)
    rep = sim.run_until()
    # one adapter transfer (1 tick) + 1 output token (1 tick)
    assert rep.makespan == 2
    assert rep.mean_ttft == 1


def test_empty_workload_finishes_at_zero():
    sim = scripted(1, 1, [0], [[]], slots=1)
    sim.engine.stop()
    rep = sim.report()
    assert rep.makespan == 0 and rep.n_requests == 0


def test_runs_are_deterministic():
    import numpy as np

    rng = np.random.default_rng(3)
    starts = [int(x) for x in rng.integers(0, 50, 6)]
    plan = [[int(x) for x in rng.integers(1, 30, 3)] for _ in range(6)]
    a = scripted(6, 4, starts, plan, slots=2, eviction="distance", prefetch="distance", threshold=5)
    b = scripted(6, 4, starts, plan, slots=2, eviction="distance", prefetch="distance", threshold=5)
    assert a.run_until().to_dict() == b.run_until().to_dict()
    assert a.engine.trace == b.engine.trace
    assert tiny_cost() == tiny_cost()
