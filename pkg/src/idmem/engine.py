"""Deterministic discrete-event core.

Time is kept as :class:`fractions.Fraction` ticks (1 tick = 1 ms of modeled
time) so that event ordering never depends on floating point rounding.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Optional

SimTime = Fraction

INF = math.inf


def as_time(value) -> Fraction:
    """Convert an int, decimal string, float or Fraction to an exact tick count."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("bool is not a time value")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"time must be finite, got {value}")
        # repr gives the shortest decimal that round-trips, so 0.02 stays 1/50
        return Fraction(repr(value))
    return Fraction(value)


class CausalityError(RuntimeError):
    """An event was scheduled before the current clock."""


class EventKind(enum.Enum):
    AGENT_REQUEST_ISSUED = "AgentRequestIssued"
    GENERATION_FINISHED = "GenerationFinished"
    ACTION_FINISHED = "ActionFinished"
    TRANSFER_CHUNK_DONE = "TransferChunkDone"
    PREFETCH_POLL = "PrefetchPoll"
    INTERACTION_TRIGGERED = "InteractionTriggered"
    MESSAGE_ARRIVAL = "MessageArrival"
    # environment clock for spatial workloads: moves agents, detects contacts
    MOVEMENT_TICK = "MovementTick"


@dataclass(eq=False)
class Event:
    time: Fraction
    kind: EventKind
    payload: tuple = ()
    sequence: int = -1
    cancelled: bool = False

    def key(self):
        return (self.time, self.sequence)

    def __lt__(self, other: "Event") -> bool:
        return self.key() < other.key()

    def __repr__(self) -> str:
        return f"Event(t={self.time}, #{self.sequence}, {self.kind.value}, {self.payload})"


class Phase(enum.Enum):
    ACTING = "Acting"
    WAITING_FOR_MEMORY = "WaitingForMemory"
    GENERATING = "Generating"
    IDLE = "Idle"


# Legal agent phase transitions. Idle -> Acting covers reactivation.
_PHASE_EDGES = {
    Phase.ACTING: {Phase.WAITING_FOR_MEMORY, Phase.GENERATING, Phase.IDLE},
    Phase.WAITING_FOR_MEMORY: {Phase.GENERATING},
    Phase.GENERATING: {Phase.ACTING, Phase.IDLE},
    Phase.IDLE: {Phase.WAITING_FOR_MEMORY, Phase.GENERATING, Phase.ACTING},
}


@dataclass(eq=False)
class Agent:
    id: int
    phase: Phase = Phase.ACTING
    memory_refs: set = field(default_factory=set)
    action_end: Optional[Fraction] = None
    distance: Any = INF
    workload_state: dict = field(default_factory=dict)
    calls_done: int = 0

    def transition(self, phase: Phase) -> None:
        if phase not in _PHASE_EDGES[self.phase]:
            raise RuntimeError(f"agent {self.id}: illegal transition {self.phase.value} -> {phase.value}")
        self.phase = phase

    @property
    def active(self) -> bool:
        return self.phase in (Phase.WAITING_FOR_MEMORY, Phase.GENERATING)


@dataclass(frozen=True)
class CostModel:
    """Linear token cost model plus a single host-to-device link.

    ``transfer_bandwidth`` is in bytes per tick; the default 64 MiB/tick is
    64 GiB/s with 1 tick = 1 ms.
    """

    prefill_per_token: Fraction = Fraction(1, 50)
    decode_per_token: Fraction = Fraction(3, 10)
    transfer_bandwidth: Fraction = Fraction(64 * 2**20)
    transfer_latency: Fraction = Fraction(0)
    chunk_size: int = 16 * 2**20

    def __post_init__(self):
        for name in ("prefill_per_token", "decode_per_token", "transfer_bandwidth", "transfer_latency"):
            object.__setattr__(self, name, as_time(getattr(self, name)))
        if self.prefill_per_token <= 0 or self.decode_per_token <= 0:
            raise ValueError("per-token costs must be strictly positive")
        if self.transfer_bandwidth <= 0:
            raise ValueError("transfer_bandwidth must be strictly positive")
        if self.transfer_latency < 0:
            raise ValueError("transfer_latency must be non-negative")
        if int(self.chunk_size) != self.chunk_size or self.chunk_size <= 0:
            raise ValueError("chunk_size must be a positive integer")

    def prefill_time(self, prompt_tokens: int, cached_tokens: int = 0) -> Fraction:
        if cached_tokens < 0 or prompt_tokens < 0:
            raise ValueError("token counts must be non-negative")
        if cached_tokens > prompt_tokens:
            raise ValueError(f"cached_tokens ({cached_tokens}) exceeds prompt_tokens ({prompt_tokens})")
        return self.prefill_per_token * (prompt_tokens - cached_tokens)

    def decode_time(self, output_tokens: int) -> Fraction:
        if output_tokens < 0:
            raise ValueError("output_tokens must be non-negative")
        return self.decode_per_token * output_tokens

    def transfer_time(self, nbytes: int) -> Fraction:
        if nbytes < 0:
            raise ValueError("nbytes must be non-negative")
        return self.transfer_latency + Fraction(nbytes) / self.transfer_bandwidth

    def chunk_time(self, nbytes: int, first: bool) -> Fraction:
        """Duration of one chunk; the link latency is paid once per object."""
        t = Fraction(nbytes) / self.transfer_bandwidth
        return t + self.transfer_latency if first else t

    def chunks(self, nbytes: int) -> list[int]:
        full, rest = divmod(nbytes, self.chunk_size)
        return [self.chunk_size] * full + ([rest] if rest else [])


Handler = Callable[[Event], None]


class Engine:
    """Event queue with a virtual clock.

    Events are ordered by ``(time, sequence)`` where ``sequence`` is a global
    insertion counter, so simultaneous events run in scheduling order.
    """

    def __init__(self, record_trace: bool = True):
        self.clock: Fraction = Fraction(0)
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._handlers: dict[EventKind, Handler] = {}
        self.record_trace = record_trace
        self.trace: list[tuple[Fraction, str, tuple]] = []
        self.processed = 0
        self.hooks: list[Callable[[Event], None]] = []
        self.stopped = False

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, event: Event) -> Event:
        if event.time < self.clock:
            raise CausalityError(f"cannot schedule {event.kind.value} at t={event.time} (clock={self.clock})")
        event.sequence = next(self._seq)
        heapq.heappush(self._queue, event)
        return event

    def at(self, time, kind: EventKind, *payload) -> Event:
        return self.schedule(Event(as_time(time), kind, tuple(payload)))

    def after(self, delay, kind: EventKind, *payload) -> Event:
        return self.at(self.clock + as_time(delay), kind, *payload)

    def cancel(self, event: Optional[Event]) -> None:
        if event is not None:
            event.cancelled = True

    def __len__(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def peek_time(self) -> Optional[Fraction]:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def step(self) -> Optional[Event]:
        while self._queue:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            assert event.time >= self.clock
            self.clock = event.time
            if self.record_trace:
                self.trace.append((event.time, event.kind.value, event.payload))
            handler = self._handlers.get(event.kind)
            if handler is not None:
                handler(event)
            self.processed += 1
            for hook in self.hooks:
                hook(event)
            return event
        return None

    def stop(self) -> None:
        """Make :meth:`run` return after the current event."""
        self.stopped = True

    def run(self, limit=None) -> int:
        """Process events with ``time <= limit`` (all events if ``limit`` is None)."""
        limit = None if limit is None else as_time(limit)
        n = 0
        while not self.stopped:
            t = self.peek_time()
            if t is None or (limit is not None and t > limit):
                return n
            self.step()
            n += 1
        return n
