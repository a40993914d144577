"""Per-request records, run reports and cross-run comparisons."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

CSV_HEADER = ["run_id", "preset", "n_agents", "seed", "makespan_ticks", "mean_ttft", "p99_ttft", "load_ticks",
              "prefill_ticks", "decode_ticks", "other_ticks", "transferred_bytes", "miss_count"]


class IncompleteRecord(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class RequestRecord:
    agent: int
    t_issue: Fraction
    t_memory_ready: Optional[Fraction] = None
    t_first_token: Optional[Fraction] = None
    t_done: Optional[Fraction] = None
    loaded_bytes: int = 0
    recomputed_tokens: int = 0
    prefill: Fraction = Fraction(0)
    decode: Fraction = Fraction(0)
    # part of the memory wait spent blocked on device space rather than transfers
    blocked: Fraction = Fraction(0)
    miss: bool = False

    @property
    def complete(self) -> bool:
        return None not in (self.t_memory_ready, self.t_first_token, self.t_done)

    def check(self) -> None:
        if not self.complete:
            raise IncompleteRecord(f"request of agent {self.agent} issued at {self.t_issue} is incomplete")
        if not (self.t_issue <= self.t_memory_ready <= self.t_first_token <= self.t_done):
            raise ValueError(f"timestamps out of order: {self}")

    @property
    def memory_wait(self) -> Fraction:
        return self.t_memory_ready - self.t_issue


def ttft(record: RequestRecord) -> Fraction:
    if record.t_first_token is None:
        raise IncompleteRecord(f"request of agent {record.agent} has no first token yet")
    return record.t_first_token - record.t_issue


@dataclass
class Breakdown:
    load: float
    prefill: float
    decode: float
    other: float

    @property
    def total(self) -> float:
        return self.load + self.prefill + self.decode + self.other

    def fractions(self) -> dict:
        t = self.total
        return {k: (v / t if t else 0.0) for k, v in asdict(self).items()}

    def normalized(self, baseline_total: float) -> dict:
        return {k: v / baseline_total for k, v in asdict(self).items()}


def breakdown(records: Sequence[RequestRecord]) -> Breakdown:
    """Aggregate request time into load, prefill, decode and other.

    Load is time waiting for memory transfers, other is time blocked on
    device space. The four parts sum to the total request lifetime.
    """
    load = prefill = decode = other = Fraction(0)
    for r in records:
        r.check()
        wait = r.memory_wait
        load += wait - r.blocked
        other += r.blocked
        prefill += r.prefill
        decode += r.decode
    return Breakdown(float(load), float(prefill), float(decode), float(other))


@dataclass
class RunReport:
    makespan: float
    n_requests: int
    mean_ttft: float
    median_ttft: float
    p99_ttft: float
    breakdown: dict
    total_transferred: int
    miss_count: int
    recomputed_tokens: int
    load_per_step: float
    per_step_time: list
    # channel time spent on host-to-device transfers within the makespan
    transfer_time: float = 0.0
    config_hash: str = ""
    workload_hash: str = ""
    preset: str = ""
    n_agents: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def load_share(self) -> float:
        b = self.breakdown
        total = b["load"] + b["prefill"] + b["decode"] + b["other"]
        return b["load"] / total if total else 0.0

    @property
    def transfer_share(self) -> float:
        """Fraction of the makespan during which the transfer channel was busy."""
        return self.transfer_time / self.makespan if self.makespan else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    def csv_row(self, run_id: str) -> list:
        b = self.breakdown
        return [run_id, self.preset, self.n_agents, self.seed, _num(self.makespan), _num(self.mean_ttft),
                _num(self.p99_ttft), _num(b["load"]), _num(b["prefill"]), _num(b["decode"]), _num(b["other"]),
                self.total_transferred, self.miss_count]


def _num(x: float) -> str:
    return repr(float(x))


def write_csv(rows: Sequence[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def _per_step(records, makespan: Fraction, step_length: Fraction) -> list[float]:
    """Request-active time falling into each ``step_length`` bucket of the makespan."""
    if makespan <= 0:
        return []
    n = math.ceil(makespan / step_length)
    out = np.zeros(n)
    step = float(step_length)
    for r in records:
        a, b = float(r.t_issue), float(r.t_done)
        k = int(a // step)
        while k < n and k * step < b:
            lo, hi = max(a, k * step), min(b, (k + 1) * step)
            if hi > lo:
                out[k] += hi - lo
            k += 1
    return [float(x) for x in out]


def build_report(records: Sequence[RequestRecord], transferred: int, step_length, transfer_time=0,
                 **meta) -> RunReport:
    step_length = Fraction(step_length)
    for r in records:
        r.check()
    makespan = max((r.t_done for r in records), default=Fraction(0))
    ttfts = np.array([float(ttft(r)) for r in records]) if records else np.zeros(0)
    bd = breakdown(records)
    n_steps = max(1, math.ceil(makespan / step_length)) if makespan else 1
    return RunReport(
        makespan=float(makespan),
        n_requests=len(records),
        mean_ttft=float(ttfts.mean()) if len(ttfts) else 0.0,
        median_ttft=float(np.median(ttfts)) if len(ttfts) else 0.0,
        p99_ttft=float(np.percentile(ttfts, 99)) if len(ttfts) else 0.0,
        breakdown=asdict(bd),
        total_transferred=int(transferred),
        miss_count=sum(1 for r in records if r.miss),
        recomputed_tokens=sum(r.recomputed_tokens for r in records),
        load_per_step=bd.load / n_steps,
        per_step_time=_per_step(records, makespan, step_length),
        transfer_time=float(transfer_time),
        **meta,
    )


def speedup(baseline: RunReport, treatment: RunReport) -> float:
    if baseline.workload_hash != treatment.workload_hash:
        raise ConfigMismatch("reports come from different workloads")
    if treatment.makespan == 0:
        return 1.0 if baseline.makespan == 0 else math.inf
    return baseline.makespan / treatment.makespan


def compare(baseline: RunReport, treatment: RunReport) -> dict:
    """Speedup, TTFT deltas and breakdowns normalized to the baseline total."""
    s = speedup(baseline, treatment)
    base_bd = Breakdown(**baseline.breakdown)
    treat_bd = Breakdown(**treatment.breakdown)
    denom = base_bd.total or 1.0
    reduction = 1.0 - treatment.mean_ttft / baseline.mean_ttft if baseline.mean_ttft else 0.0
    return {
        "speedup": s,
        "baseline_preset": baseline.preset,
        "treatment_preset": treatment.preset,
        "workload_hash": baseline.workload_hash,
        "mean_ttft": {"baseline": baseline.mean_ttft, "treatment": treatment.mean_ttft,
                      "delta": treatment.mean_ttft - baseline.mean_ttft},
        "ttft_reduction_pct": 100.0 * reduction,
        "breakdown_normalized": {"baseline": base_bd.normalized(denom), "treatment": treat_bd.normalized(denom)},
    }
