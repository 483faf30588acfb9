"""Deterministic discrete-event message bus and lifecycle orchestrator.

Four pools (process engine, rules engine, context engine, external
systems) exchange typed messages over FIFO channels.  The loop is a
single-threaded queue ordered by (tick, seq); identical scenario and
seed give byte-identical traces.  The process engine and the context
engine never talk directly: only the rules engine bridges them.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .errors import ForbiddenRoute
from .sources import ScriptedSource, advance, respond_poll
from .trace import Trace

POOLS = ("process", "rules", "context", "external")

# the architecture's conversation graph; anything else is rejected
ALLOWED_ROUTES = frozenset({
    ("process", "rules"), ("rules", "process"),
    ("rules", "context"), ("context", "rules"),
    ("context", "external"), ("external", "context"),
})

MESSAGE_KINDS = frozenset({
    "Register", "ContextRequest", "ContextSnapshot", "ContextNotification",
    "RuleEvalRequest", "Decision", "BreakRollback", "StartCompensation",
    "SourceEvent", "PollRequest", "PollResponse",
    "ProcessCompleted", "ProcessCancelled", "ShutdownModel",
})

DEFAULT_MAX_STEPS = 100_000


@dataclass(frozen=True)
class Message:
    seq: int
    sent_tick: int
    deliver_tick: int
    sender: str
    receiver: str
    kind: str
    payload: dict


@dataclass(frozen=True)
class TimerEvent:
    seq: int
    tick: int
    pool: str
    payload: dict


@dataclass
class LatencyConfig:
    default: int = 1
    channels: dict = field(default_factory=dict)
    jitter: int = 0

    def for_channel(self, sender: str, receiver: str, rng: random.Random) -> int:
        base = self.channels.get(f"{sender}->{receiver}", self.default)
        if self.jitter > 0:
            base += rng.randint(0, self.jitter)
        return max(1, base)


class SimClock:
    """Logical tick counter; never decreases."""

    def __init__(self):
        self.tick = 0

    def advance_to(self, tick: int):
        if tick < self.tick:
            raise AssertionError(f"clock moved backwards: {self.tick} -> {tick}")
        self.tick = tick


class Simulation:
    """Owns the event queue, the clock, the seeded RNG and the trace."""

    def __init__(self, seed: int = 0, latency: LatencyConfig | None = None,
                 max_steps: int = DEFAULT_MAX_STEPS):
        self.clock = SimClock()
        self.rng = random.Random(seed)
        self.latency = latency or LatencyConfig()
        self.max_steps = max_steps
        self.trace_log = Trace()
        self.handlers = {}   # pool -> handle_message(kind, payload)
        self.timer_handlers = {}  # pool -> handle_timer(payload)
        self._queue: list[tuple[int, int, object]] = []
        self._next_seq = 0
        self._messages_in_flight = 0
        self.truncated = False
        self.is_quiescent = lambda: False

    @property
    def now(self) -> int:
        return self.clock.tick

    def register_pool(self, pool: str, handler, timer_handler=None):
        self.handlers[pool] = handler
        if timer_handler is not None:
            self.timer_handlers[pool] = timer_handler

    def route(self, sender: str, receiver: str, kind: str):
        """Reject unknown pools, unknown kinds and forbidden channels."""
        if sender not in POOLS or receiver not in POOLS:
            raise ForbiddenRoute(f"unknown pool in route {sender} -> {receiver}")
        if kind not in MESSAGE_KINDS:
            raise ForbiddenRoute(f"unknown message kind {kind!r}")
        if (sender, receiver) not in ALLOWED_ROUTES:
            raise ForbiddenRoute(
                f"{sender} -> {receiver} is outside the conversation graph; "
                "only the rules engine may talk to the context engine"
            )

    def send(self, sender: str, receiver: str, kind: str, payload: dict):
        self.route(sender, receiver, kind)
        seq = self._next_seq
        self._next_seq += 1
        deliver = self.now + self.latency.for_channel(sender, receiver, self.rng)
        message = Message(seq, self.now, deliver, sender, receiver, kind, payload)
        heapq.heappush(self._queue, (deliver, seq, message))
        self._messages_in_flight += 1

    def timer(self, pool: str, payload: dict, at_tick: int):
        seq = self._next_seq
        self._next_seq += 1
        heapq.heappush(self._queue, (max(at_tick, self.now), seq,
                                     TimerEvent(seq, at_tick, pool, payload)))

    def trace(self, pool: str, kind: str, payload: dict):
        self.trace_log.emit(self.now, pool, kind, payload)

    def run(self) -> Trace:
        steps = 0
        while self._queue:
            if self._messages_in_flight == 0 and self.is_quiescent():
                break  # only idle timers remain; the run is over
            steps += 1
            if steps > self.max_steps:
                self.truncated = True
                self.trace("context", "run_truncated", {"max_steps": self.max_steps})
                break
            tick, _, event = heapq.heappop(self._queue)
            self.clock.advance_to(tick)
            if isinstance(event, Message):
                self._messages_in_flight -= 1
                self.trace(event.sender, event.kind, {
                    "to": event.receiver,
                    "msg_seq": event.seq,
                    "sent": event.sent_tick,
                    "data": event.payload,
                })
                handler = self.handlers.get(event.receiver)
                if handler is not None:
                    handler(event.kind, event.payload)
            else:
                handler = self.timer_handlers.get(event.pool)
                if handler is not None:
                    handler(event.payload)
        return self.trace_log


class ExternalSystems:
    """Pool of scripted sources answering polls and pushing events."""

    POOL = "external"

    def __init__(self, sim: Simulation, sources: dict[str, ScriptedSource]):
        self.sim = sim
        self.sources = sources

    def schedule_timeline(self):
        for source in self.sources.values():
            ticks = sorted({entry.tick for entry in source.timeline})
            for tick in ticks:
                self.sim.timer(self.POOL, {
                    "kind": "timeline", "source": source.source_id, "at": tick,
                }, tick)

    def handle_timer(self, payload: dict):
        if payload.get("kind") != "timeline":
            return
        source = self.sources[payload["source"]]
        for event in advance(source, payload["at"]):
            self.sim.send(self.POOL, "context", "SourceEvent", event)

    def handle_message(self, kind: str, payload: dict):
        if kind != "PollRequest":
            self.sim.trace(self.POOL, "engine_error", {
                "error": "UnhandledMessage", "detail": kind,
            })
            return
        source = self.sources.get(payload["source"])
        if source is None:
            self.sim.trace(self.POOL, "engine_error", {
                "error": "UnknownSource", "detail": payload["source"],
            })
            return
        response = respond_poll(source, payload["categories"], self.sim.now)
        reply = {
            "source": response["source_id"],
            "values": response["values"],
            "absent": response["absent"],
            "purpose": payload.get("purpose", "refresh"),
        }
        for key in ("instance", "model"):
            if key in payload:
                reply[key] = payload[key]
        self.sim.send(self.POOL, "context", "PollResponse", reply)

    def emit_mirror(self, category_id: str, payload):
        """The BPM system acting as an external context source."""
        for source in self.sources.values():
            if category_id in source.descriptor.provided_categories and source.mirrors:
                source.record_mirror(category_id, payload)
                self.sim.send(self.POOL, "context", "SourceEvent", {
                    "source_id": source.source_id,
                    "category_id": category_id,
                    "payload": payload,
                    "ts": self.sim.now,
                })
                return
