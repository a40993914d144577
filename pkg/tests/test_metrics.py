import csv
import io
import json
import math
from fractions import Fraction

import pytest

from idmem.metrics import (CSV_HEADER, Breakdown, ConfigMismatch, IncompleteRecord, RequestRecord, RunReport,
                           breakdown, build_report, compare, speedup, ttft, write_csv)

F = Fraction
MiB = 2**20


def rec(agent, issue, ready, first, done, prefill=None, decode=None, blocked=0, miss=False):
    r = RequestRecord(agent, F(issue), F(ready), F(first), F(done), blocked=F(blocked), miss=miss)
    r.prefill = F(first) - F(ready) if prefill is None else F(prefill)
    r.decode = F(done) - F(first) if decode is None else F(decode)
    return r


def test_ttft_is_first_token_minus_issue():
    assert ttft(rec(0, 10, 14, 15, 20)) == 5
    with pytest.raises(IncompleteRecord):
        ttft(RequestRecord(0, F(1)))


def test_incomplete_or_unordered_records_rejected():
    with pytest.raises(IncompleteRecord):
        RequestRecord(0, F(0), F(1)).check()
    with pytest.raises(ValueError):
        rec(0, 5, 4, 6, 7).check()


def test_breakdown_parts_sum_to_request_time():
    records = [rec(0, 0, 4, 6, 10, blocked=1), rec(1, 2, 2, 3, 5)]
    b = breakdown(records)
    assert (b.load, b.prefill, b.decode, b.other) == (3, 3, 6, 1)
    assert b.total == sum(float(r.t_done - r.t_issue) for r in records)
    assert math.isclose(sum(b.fractions().values()), 1.0)


def test_breakdown_normalized_to_baseline_total():
    base, treat = Breakdown(4, 2, 2, 0), Breakdown(1, 2, 2, 0)
    assert base.normalized(base.total) == {"load": 0.5, "prefill": 0.25, "decode": 0.25, "other": 0.0}
    assert sum(treat.normalized(base.total).values()) == 0.625


def test_report_statistics():
    records = [rec(i, 0, 0, i + 1, i + 2) for i in range(100)]
    rep = build_report(records, transferred=123, step_length=10, transfer_time=26, preset="x")
    assert rep.makespan == 101
    assert rep.mean_ttft == 50.5
    assert rep.p99_ttft == pytest.approx(99.01)
    assert rep.total_transferred == 123 and rep.n_requests == 100
    assert rep.transfer_share == pytest.approx(26 / 101)
    assert len(rep.per_step_time) == 11
    assert sum(rep.per_step_time) == pytest.approx(sum(float(r.t_done - r.t_issue) for r in records))


def test_empty_report():
    rep = build_report([], 0, 10)
    assert rep.makespan == 0 and rep.mean_ttft == 0 and rep.per_step_time == []
    assert rep.load_share == 0 and rep.transfer_share == 0


def test_load_per_step_and_miss_count():
    records = [rec(0, 0, 6, 6, 8, miss=True), rec(1, 10, 10, 11, 20)]
    rep = build_report(records, 0, step_length=5)
    assert rep.miss_count == 1
    assert rep.load_per_step == 6 / 4
    assert rep.load_share == 6 / 18


def test_speedup_and_compare():
    a = build_report([rec(0, 0, 5, 6, 10)], 0, 10, workload_hash="w", preset="sglang_like")
    b = build_report([rec(0, 0, 0, 1, 5)], 0, 10, workload_hash="w", preset="scalesim")
    assert speedup(a, b) == 2
    c = compare(a, b)
    assert c["speedup"] == 2 and c["ttft_reduction_pct"] == pytest.approx(100 * (1 - 1 / 6))
    assert c["breakdown_normalized"]["baseline"]["load"] == 0.5
    b.workload_hash = "other"
    with pytest.raises(ConfigMismatch):
        speedup(a, b)


def test_csv_header_is_exact_and_rows_round_trip():
    assert ",".join(CSV_HEADER) == ("run_id,preset,n_agents,seed,makespan_ticks,mean_ttft,p99_ttft,load_ticks,"
                                    "prefill_ticks,decode_ticks,other_ticks,transferred_bytes,miss_count")
    rep = build_report([rec(0, 0, 1, 2, 3)], 7, 10, preset="hicache_like", n_agents=1, seed=4)
    text = write_csv([rep.csv_row("r1")])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == CSV_HEADER
    assert rows[1][:4] == ["r1", "hicache_like", "1", "4"] and rows[1][-2:] == ["7", "0"]


def test_report_json_round_trip():
    rep = build_report([rec(0, 0, 1, 2, 3)], 7, 10, preset="p", config_hash="abc")
    again = RunReport.from_dict(json.loads(rep.to_json()))
    assert again == rep


def test_ttft_examples():
    assert ttft(rec(0, 100, 130, 150, 160)) == 50
    assert ttft(rec(0, 100, 100, 120, 130)) == 20


def _adapter_sim(starts, slots, **kw):
    from helpers import scripted, tiny_cost

    cost = tiny_cost(transfer_bandwidth=MiB, chunk_size=MiB)
    return scripted(len(starts), 1, starts, [[] for _ in starts], slots, adapter_bytes=4 * MiB, cost=cost, **kw), cost


def test_reactive_load_is_k_transfers():
    sim, cost = _adapter_sim([0, 20, 40, 60], slots=1)
    rep = sim.run_until()
    assert rep.breakdown["load"] == 4 * cost.transfer_time(4 * MiB)
    assert rep.miss_count == 4


def test_all_resident_means_zero_load():
    from helpers import scripted

    sim = scripted(2, 3, [0, 5], [[10, 10], [10, 10]], slots=2)
    sim.run_until()
    later = [r for r in sim.records if r.t_issue > 5]
    assert later and all(r.memory_wait == 0 for r in later)
    assert breakdown(later).load == 0


def test_transferred_bytes_match_chunk_events():
    sim, _ = _adapter_sim([0, 3, 6, 9, 12], slots=2, eviction="distance", prefetch="distance", threshold=10)
    rep = sim.run_until()
    chunk_bytes = sum(p[2] for t, k, p in sim.engine.trace if k == "TransferChunkDone" and t <= rep.makespan)
    assert rep.total_transferred == chunk_bytes


def test_self_normalized_breakdown_sums_to_one():
    records = [rec(0, 0, 4, 6, 10, blocked=1), rec(1, 2, 2, 3, 5)]
    a = build_report(records, 0, 10, workload_hash="w")
    c = compare(a, a)
    assert c["speedup"] == 1.0
    assert math.isclose(sum(c["breakdown_normalized"]["baseline"].values()), 1.0)
    assert all(0 <= v <= 1 for v in Breakdown(**a.breakdown).fractions().values())
