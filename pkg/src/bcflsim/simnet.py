"""Deterministic discrete-event scheduler and simulated message network.

Time is integer milliseconds. Events at equal times fire in insertion order,
so a run is fully determined by the configuration and seeds.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)


class RoutingError(Exception):
    """Raised when a message names a node the network does not know."""


def node_rng(seed: int, node: int, stream: str = "") -> np.random.Generator:
    """Independent generator for one node, derived by hashing (seed, node, stream)."""
    digest = hashlib.sha256(f"{seed}:{node}:{stream}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


@dataclass(order=True)
class SimEvent:
    time: int
    seq: int
    action: Callable[[], Any] = field(compare=False)
    label: str = field(default="", compare=False)
    cancelled: bool = field(default=False, compare=False)


class Simulator:
    """Single-threaded event loop over a (time, insertion order) heap."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._live: dict[int, SimEvent] = {}
        self.trace: list[tuple[int, int, str]] = []
        self.processed = 0

    def schedule(self, action: Callable[[], Any], delay_ms: int = 0, label: str = "") -> int:
        if delay_ms < 0:
            raise ValueError(f"negative delay {delay_ms}")
        ev = SimEvent(self.now + int(delay_ms), next(self._seq), action, label)
        heapq.heappush(self._queue, ev)
        self._live[ev.seq] = ev
        return ev.seq

    def schedule_at(self, time_ms: int, action: Callable[[], Any], label: str = "") -> int:
        return self.schedule(action, max(0, time_ms - self.now), label)

    def cancel(self, event_id: int) -> None:
        ev = self._live.pop(event_id, None)
        if ev is not None:
            ev.cancelled = True

    def pending(self) -> int:
        return len(self._live)

    def next_time(self) -> int | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def step(self) -> bool:
        """Process the next event. Returns False when the queue is empty."""
        if self.next_time() is None:
            return False
        ev = heapq.heappop(self._queue)
        del self._live[ev.seq]
        self.now = ev.time
        self.trace.append((ev.time, ev.seq, ev.label))
        self.processed += 1
        ev.action()
        return True

    def run_until(self, t_ms: int) -> int:
        """Process every event with time <= t_ms, then set the clock to t_ms."""
        if t_ms < self.now:
            raise ValueError(f"cannot run backwards to {t_ms} (now {self.now})")
        count = 0
        while True:
            nt = self.next_time()
            if nt is None or nt > t_ms:
                break
            self.step()
            count += 1
        self.now = t_ms
        return count

    def run_while(self, keep_going: Callable[[], bool], deadline_ms: int) -> int:
        """Step until keep_going() is false, the queue empties, or the deadline passes."""
        count = 0
        while keep_going():
            nt = self.next_time()
            if nt is None or nt > deadline_ms:
                break
            self.step()
            count += 1
        return count


@dataclass(frozen=True)
class PartitionWindow:
    side_a: frozenset[int]
    side_b: frozenset[int]
    start_ms: int
    end_ms: int

    def __post_init__(self) -> None:
        if self.end_ms < self.start_ms:
            raise ValueError("partition window ends before it starts")

    def separates(self, src: int, dst: int, t: int) -> bool:
        if not (self.start_ms <= t <= self.end_ms):
            return False
        return (src in self.side_a and dst in self.side_b) or (src in self.side_b and dst in self.side_a)


@dataclass
class NetworkConfig:
    base_latency_ms: int = 50
    jitter_ms: int = 20
    drop_probability: float = 0.0
    partitions: list[PartitionWindow] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if self.base_latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latencies must be non-negative")


@dataclass
class Message:
    src: int
    dst: int
    payload: Any
    send_time: int
    deliver_time: int
    size_bytes: int
    kind: str = ""


class Delivered(NamedTuple):
    deliver_time: int


class Dropped(NamedTuple):
    reason: str


def transmit(src: int, dst: int, send_time: int, cfg: NetworkConfig,
             rng: np.random.Generator) -> Delivered | Dropped:
    """Decide the fate of one message. Both random draws are always consumed
    so the stream position does not depend on the outcome."""
    u = rng.random()
    jitter = int(rng.integers(0, cfg.jitter_ms + 1)) if cfg.jitter_ms > 0 else 0
    for p in cfg.partitions:
        if p.separates(src, dst, send_time):
            return Dropped("partition")
    if u < cfg.drop_probability:
        return Dropped("random")
    return Delivered(send_time + cfg.base_latency_ms + jitter)


Handler = Callable[[Message], None]


class Network:
    """In-memory network. Handlers are registered per (node, message kind)."""

    def __init__(self, sim: Simulator, cfg: NetworkConfig) -> None:
        self.sim = sim
        self.cfg = cfg
        self.nodes: set[int] = set()
        self.crashed: set[int] = set()
        self._handlers: dict[tuple[int, str], Handler] = {}
        self._rngs: dict[int, np.random.Generator] = {}
        self.sent: Counter[str] = Counter()
        self.delivered: Counter[str] = Counter()
        self.dropped: Counter[str] = Counter()
        self.lost_to_crash: Counter[str] = Counter()
        self.bytes_sent = 0
        self.log: list[tuple[int, int, int, str, str]] = []

    def add_node(self, node: int) -> None:
        self.nodes.add(node)

    def on(self, node: int, kind: str, handler: Handler) -> None:
        self._handlers[(node, kind)] = handler

    def off(self, kind: str) -> None:
        for key in [k for k in self._handlers if k[1] == kind]:
            del self._handlers[key]

    def crash(self, node: int) -> None:
        self.crashed.add(node)

    def recover(self, node: int) -> None:
        self.crashed.discard(node)

    def alive(self, node: int) -> bool:
        return node in self.nodes and node not in self.crashed

    def _rng(self, node: int) -> np.random.Generator:
        if node not in self._rngs:
            self._rngs[node] = node_rng(self.cfg.seed, node, "net")
        return self._rngs[node]

    def send(self, src: int, dst: int, payload: Any, kind: str, size_bytes: int = 0) -> Delivered | Dropped:
        if src not in self.nodes:
            raise RoutingError(f"unknown source node {src}")
        if dst not in self.nodes:
            raise RoutingError(f"unknown destination node {dst}")
        if size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")
        if src in self.crashed:
            # a crashed node emits nothing; not counted as traffic
            return Dropped("sender-crashed")
        now = self.sim.now
        self.sent[kind] += 1
        self.bytes_sent += size_bytes
        outcome = transmit(src, dst, now, self.cfg, self._rng(src))
        if isinstance(outcome, Dropped):
            self.dropped[kind] += 1
            self.log.append((now, src, dst, kind, outcome.reason))
            return outcome
        self.delivered[kind] += 1
        self.log.append((now, src, dst, kind, "ok"))
        msg = Message(src, dst, payload, now, outcome.deliver_time, size_bytes, kind)
        self.sim.schedule_at(outcome.deliver_time, lambda: self._deliver(msg), f"{kind}:{src}->{dst}")
        return outcome

    def broadcast(self, src: int, dsts, payload: Any, kind: str, size_bytes: int = 0) -> None:
        for dst in dsts:
            if dst != src:
                self.send(src, dst, payload, kind, size_bytes)

    def _deliver(self, msg: Message) -> None:
        if msg.dst in self.crashed:
            self.lost_to_crash[msg.kind] += 1
            return
        handler = self._handlers.get((msg.dst, msg.kind))
        if handler is not None:
            handler(msg)

    def counts(self) -> dict[str, int]:
        return dict(sorted(self.sent.items()))
