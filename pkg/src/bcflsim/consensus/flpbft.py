"""FL-PBFT: three-phase agreement on an aggregate's Merkle root, with replicas that
recompute the aggregate, check its quality and discount suspected Byzantine nodes."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..crypto import KeyRing
from ..learning import DatasetPartition, ModelParams, UpdateRecord, evaluate, fedavg
from ..simnet import Message, Network, Simulator
from ..storage import model_root
from .base import ConsensusOutcome, Done, RoundContext

PRE_PREPARE, PREPARE, COMMIT = "PRE-PREPARE", "PREPARE", "COMMIT"
_CODES = {PRE_PREPARE: 1, PREPARE: 2, COMMIT: 3}
_KINDS = {v: k for k, v in _CODES.items()}
PHASES = ("idle", "pre-prepared", "prepared", "committed")

MAGNITUDE_FACTOR = 3.0
COSINE_FLOOR = 0.0
# Honest deltas on 2-class partitions drift to cosine ~ -0.6 against each other,
# so the engine only treats near-antipodal deltas as suspect.
ENGINE_COSINE_FLOOR = -0.9
QUALITY_MARGIN = 0.1


class InvariantViolation(Exception):
    pass


@dataclass(frozen=True)
class CommitteeConfig:
    nodes: tuple[int, ...]
    f: int

    def __post_init__(self) -> None:
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("committee nodes must be distinct")
        if self.f < 0 or len(self.nodes) < 3 * self.f + 1:
            raise ValueError(f"n={len(self.nodes)} cannot tolerate f={self.f}; need n >= 3f+1")

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @classmethod
    def for_nodes(cls, nodes: Sequence[int]) -> CommitteeConfig:
        return cls(tuple(nodes), (len(nodes) - 1) // 3)


def leader_for(view: int, cfg: CommitteeConfig, barred: frozenset[int] = frozenset()) -> int:
    eligible = [x for x in cfg.nodes if x not in barred] or list(cfg.nodes)
    return eligible[view % len(eligible)]


@dataclass
class ViewState:
    view: int = 0
    sequence: int = 1
    phase: str = "idle"
    accepted_root: bytes | None = None
    prepare_votes: dict[bytes, set[int]] = field(default_factory=dict)
    commit_votes: dict[bytes, set[int]] = field(default_factory=dict)

    def advance(self, phase: str) -> None:
        if PHASES.index(phase) <= PHASES.index(self.phase):
            raise InvariantViolation(f"phase {self.phase} -> {phase} is not forward")
        self.phase = phase


@dataclass(frozen=True)
class PbftMessage:
    kind: str
    view: int
    sequence: int
    root: bytes
    accuracy: float | None = None
    signature: bytes = b""

    def body(self) -> bytes:
        out = struct.pack(">Bqq", _CODES[self.kind], self.view, self.sequence) + self.root
        if self.kind == PREPARE:
            out += struct.pack(">d", self.accuracy)
        return out

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> PbftMessage:
        if len(data) < 1 or data[0] not in _KINDS:
            raise ValueError("unknown message kind")
        kind = _KINDS[data[0]]
        want = 1 + 8 + 8 + 32 + (8 if kind == PREPARE else 0) + 32
        if len(data) != want:
            raise ValueError("malformed message")
        _, view, seq = struct.unpack_from(">Bqq", data, 0)
        root = data[17:49]
        acc = struct.unpack_from(">d", data, 49)[0] if kind == PREPARE else None
        return cls(kind, view, seq, root, acc, data[-32:])

    @classmethod
    def signed(cls, keys: KeyRing, sender: int, kind: str, view: int, sequence: int, root: bytes,
               accuracy: float | None = None) -> PbftMessage:
        unsigned = cls(kind, view, sequence, root, accuracy if kind == PREPARE else None)
        return cls(kind, view, sequence, root, unsigned.accuracy, keys.sign(sender, unsigned.body()))

    def verify(self, keys: KeyRing, sender: int) -> bool:
        return keys.verify(sender, self.body(), self.signature)


# --- Byzantine detection -----------------------------------------------------------

def detect_byzantine(updates: Sequence[UpdateRecord], reference: ModelParams,
                     magnitude_factor: float = MAGNITUDE_FACTOR,
                     cosine_floor: float = COSINE_FLOOR) -> frozenset[int]:
    """Flag updates whose delta from `reference` is oversized relative to the median
    norm, or points away from the mean of the other deltas."""
    if len(updates) < 2:
        return frozenset()
    ref = reference.flatten()
    deltas = np.stack([u.params.flatten() - ref for u in updates])
    norms = np.linalg.norm(deltas, axis=1)
    med = float(np.median(norms))
    total = deltas.sum(axis=0)
    flagged = set()
    for i, u in enumerate(updates):
        if norms[i] > med * magnitude_factor:
            flagged.add(u.node)
            continue
        others = (total - deltas[i]) / (len(updates) - 1)
        on = float(np.linalg.norm(others))
        if norms[i] == 0 or on == 0:
            continue
        if float(deltas[i] @ others) / (norms[i] * on) < cosine_floor:
            flagged.add(u.node)
    return frozenset(flagged)


# --- replica state machine -----------------------------------------------------------

@dataclass(frozen=True)
class LocalView:
    """What one replica derives from the contributions it holds."""
    root: bytes | None
    accuracy: float
    floor: float
    suspects: frozenset[int] = frozenset()
    model: ModelParams | None = None

    @property
    def valid(self) -> bool:
        return self.root is not None and self.accuracy >= self.floor


def local_view(contributions: Sequence[UpdateRecord], reference: ModelParams, val_set: DatasetPartition,
               margin: float = QUALITY_MARGIN, magnitude_factor: float = MAGNITUDE_FACTOR,
               cosine_floor: float = COSINE_FLOOR) -> LocalView:
    suspects = detect_byzantine(contributions, reference, magnitude_factor, cosine_floor)
    kept = [u for u in contributions if u.node not in suspects]
    if not kept:
        return LocalView(None, 0.0, math.inf, suspects)
    model = fedavg(kept)
    best = max(evaluate(u.params, val_set) for u in kept)
    return LocalView(model_root(model), evaluate(model, val_set), best - margin, suspects, model)


@dataclass(frozen=True)
class ByzantineScript:
    """Messages a Byzantine replica sends at the start of every view: per kind, a map
    from target node to the root it claims (absent or None sends nothing)."""
    pre_prepare: Mapping[int, bytes | None] = field(default_factory=dict)
    prepare: Mapping[int, bytes | None] = field(default_factory=dict)
    commit: Mapping[int, bytes | None] = field(default_factory=dict)
    accuracy: float = 1.0

    @classmethod
    def equivocate(cls, targets: Sequence[int], root: bytes) -> ByzantineScript:
        m = {t: root for t in targets}
        return cls(m, m, m)


class Replica:
    def __init__(self, node: int, committee: Committee, view: LocalView) -> None:
        self.node = node
        self.c = committee
        self.local = view
        self.state = ViewState(sequence=committee.sequence)
        self.finalized: tuple[bytes, int, int] | None = None  # root, view, time
        self.buffer: list[tuple[int, PbftMessage]] = []
        self.timer: int | None = None

    # plumbing
    def _send_all(self, kind: str, root: bytes, accuracy: float | None = None) -> None:
        m = PbftMessage.signed(self.c.keys, self.node, kind, self.state.view, self.state.sequence, root, accuracy)
        data = m.to_bytes()
        self.c.net.broadcast(self.node, [x for x in self.c.cfg.nodes if x != self.node], data, "pbft", len(data))

    def enter_view(self, view: int) -> None:
        self.state = ViewState(view=view, sequence=self.c.sequence)
        if self.timer is not None:
            self.c.sim.cancel(self.timer)
        self.timer = self.c.sim.schedule(lambda v=view: self.on_timeout(v), self.c.timeout_ms, f"pbft:timeout:{self.node}")
        if leader_for(view, self.c.cfg, self.c.barred) == self.node and self.local.valid:
            self._send_all(PRE_PREPARE, self.local.root)
            self._accept()
        pending, self.buffer = self.buffer, []
        for src, m in pending:
            self.handle(src, m)

    def on_timeout(self, view: int) -> None:
        if self.c.closed or view != self.state.view or not self.c.net.alive(self.node):
            return
        if view + 1 > self.c.max_view:
            return
        self.enter_view(view + 1)

    def receive(self, msg: Message) -> None:
        if self.c.closed:
            return
        try:
            m = PbftMessage.from_bytes(msg.payload)
        except ValueError:
            return
        if msg.src not in self.c.cfg.nodes or not m.verify(self.c.keys, msg.src):
            return
        self.handle(msg.src, m)

    def handle(self, src: int, m: PbftMessage) -> None:
        st = self.state
        if m.sequence != st.sequence or m.view < st.view:
            return
        if m.view > st.view:
            self.buffer.append((src, m))
            return
        if m.kind == PRE_PREPARE:
            self.on_pre_prepare(src, m)
        elif m.kind == PREPARE:
            self.on_prepare(src, m)
        else:
            self.on_commit(src, m)

    # protocol
    def on_pre_prepare(self, src: int, m: PbftMessage) -> None:
        if src != leader_for(m.view, self.c.cfg, self.c.barred) or self.state.phase != "idle":
            return
        if not self.local.valid or m.root != self.local.root:
            return
        self._accept()

    def _accept(self) -> None:
        st = self.state
        st.advance("pre-prepared")
        st.accepted_root = self.local.root
        self._send_all(PREPARE, self.local.root, self.local.accuracy)
        st.prepare_votes.setdefault(self.local.root, set()).add(self.node)
        self._check_prepared()

    def on_prepare(self, src: int, m: PbftMessage) -> None:
        if src in self.local.suspects or m.accuracy is None or not m.accuracy >= self.local.floor:
            return
        self.state.prepare_votes.setdefault(m.root, set()).add(src)
        self._check_prepared()

    def _check_prepared(self) -> None:
        st = self.state
        if st.phase == "pre-prepared" and len(st.prepare_votes.get(st.accepted_root, ())) >= self.c.cfg.quorum:
            st.advance("prepared")
            self._send_all(COMMIT, st.accepted_root)
            st.commit_votes.setdefault(st.accepted_root, set()).add(self.node)
            self._check_committed()

    def on_commit(self, src: int, m: PbftMessage) -> None:
        self.state.commit_votes.setdefault(m.root, set()).add(src)
        self._check_committed()

    def _check_committed(self) -> None:
        st = self.state
        if st.phase == "prepared" and len(st.commit_votes.get(st.accepted_root, ())) >= self.c.cfg.quorum:
            st.advance("committed")
            if self.finalized is None:
                self.finalize(st.accepted_root)

    def finalize(self, root: bytes) -> None:
        if self.finalized is not None:
            raise InvariantViolation(f"replica {self.node} finalized sequence {self.state.sequence} twice")
        self.finalized = (root, self.state.view, self.c.sim.now)
        if self.timer is not None and self.c.all_honest_final():
            self.c.sim.cancel(self.timer)
        self.c.on_finalize(self)


class Committee:
    """Wires replicas for one sequence onto a network. Byzantine members follow a script."""

    def __init__(self, sim: Simulator, net: Network, cfg: CommitteeConfig, keys: KeyRing, sequence: int,
                 views: Mapping[int, LocalView], scripts: Mapping[int, ByzantineScript] | None = None,
                 timeout_ms: int = 2000, barred: frozenset[int] = frozenset(), max_view: int | None = None,
                 on_progress: Callable[[Committee], None] | None = None) -> None:
        self.sim, self.net, self.cfg, self.keys = sim, net, cfg, keys
        self.sequence = sequence
        self.scripts = dict(scripts or {})
        self.timeout_ms = timeout_ms
        self.barred = barred
        self.max_view = 4 * (cfg.f + 1) if max_view is None else max_view
        self.closed = False
        self.on_progress = on_progress
        self.replicas = {x: Replica(x, self, views[x]) for x in cfg.nodes if x not in self.scripts}
        self.byz_timers: list[int] = []

    def start(self) -> None:
        for x in self.cfg.nodes:
            if x in self.replicas:
                self.net.on(x, "pbft", self.replicas[x].receive)
            else:
                self.net.on(x, "pbft", lambda msg: None)
        for x in self.cfg.nodes:
            if x in self.scripts:
                self._byzantine_view(x, 0)
            elif self.net.alive(x):
                self.replicas[x].enter_view(0)

    def _byzantine_view(self, node: int, view: int) -> None:
        if self.closed or view > self.max_view or not self.net.alive(node):
            return
        s = self.scripts[node]
        for kind, table in ((PRE_PREPARE, s.pre_prepare), (PREPARE, s.prepare), (COMMIT, s.commit)):
            for target, root in sorted(table.items()):
                if root is None or target == node:
                    continue
                m = PbftMessage.signed(self.keys, node, kind, view, self.sequence, root, s.accuracy)
                data = m.to_bytes()
                self.net.send(node, target, data, "pbft", len(data))
        self.byz_timers.append(self.sim.schedule(lambda: self._byzantine_view(node, view + 1), self.timeout_ms,
                                                 f"pbft:byz:{node}"))

    def honest_live(self) -> list[Replica]:
        return [r for r in self.replicas.values() if self.net.alive(r.node)]

    def all_honest_final(self) -> bool:
        return all(r.finalized is not None for r in self.honest_live())

    def on_finalize(self, replica: Replica) -> None:
        if self.on_progress is not None:
            self.on_progress(self)

    def finalized_roots(self) -> dict[int, bytes]:
        return {x: r.finalized[0] for x, r in self.replicas.items() if r.finalized is not None}

    def close(self) -> None:
        self.closed = True
        for r in self.replicas.values():
            if r.timer is not None:
                self.sim.cancel(r.timer)
        for t in self.byz_timers:
            self.sim.cancel(t)
        self.net.off("pbft")

    def budget_ms(self) -> int:
        return (self.max_view + 2) * self.timeout_ms


def safety_holds(committee: Committee) -> bool:
    return len(set(committee.finalized_roots().values())) <= 1


class FLPBFTEngine:
    name = "flpbft"

    def __init__(self, timeout_ms: int = 2000, margin: float = QUALITY_MARGIN,
                 magnitude_factor: float = MAGNITUDE_FACTOR, cosine_floor: float = ENGINE_COSINE_FLOOR) -> None:
        self.timeout_ms = timeout_ms
        self.margin = margin
        self.magnitude_factor = magnitude_factor
        self.cosine_floor = cosine_floor

    def deadline_ms(self, ctx: RoundContext) -> int:
        f = (len(ctx.validators) - 1) // 3
        return ctx.sim.now + (f + 3) * self.timeout_ms

    def start(self, ctx: RoundContext, on_done: Done) -> None:
        cfg = CommitteeConfig.for_nodes(ctx.validators)
        cache: dict[tuple[int, ...], LocalView] = {}
        views = {}
        for x in cfg.nodes:
            contribs = ctx.view_of(x)
            key = tuple(id(u) for u in contribs)
            if key not in cache:
                cache[key] = local_view(contribs, ctx.reference, ctx.val_set, self.margin,
                                        self.magnitude_factor, self.cosine_floor)
            views[x] = cache[key]
        scripts = {}
        if ctx.byzantine:
            bogus = model_root(ModelParams(tuple((-w, -b) for w, b in ctx.reference.layers)))
            others = [x for x in cfg.nodes]
            scripts = {x: ByzantineScript.equivocate(others, bogus) for x in cfg.nodes if x in ctx.byzantine}
        done = {"flag": False}
        deadline = self.deadline_ms(ctx)

        def finish(committee: Committee, timed_out: bool) -> None:
            if done["flag"]:
                return
            done["flag"] = True
            committee.close()
            roots = committee.finalized_roots()
            if not safety_holds(committee):
                raise InvariantViolation("honest replicas finalized different roots")
            if not roots:
                on_done(ConsensusOutcome(False, reason="no finalize before timeout"))
                return
            first = min((r for r in committee.replicas.values() if r.finalized), key=lambda r: (r.finalized[2], r.node))
            lv = first.local
            included = tuple(sorted(u.node for u in ctx.view_of(first.node) if u.node not in lv.suspects))
            on_done(ConsensusOutcome(True, lv.model, lv.root, leader_for(first.finalized[1], cfg, ctx.barred),
                                     included, suspects=tuple(sorted(lv.suspects)), view=first.finalized[1],
                                     details={"finalized": len(roots)}))

        def progress(committee: Committee) -> None:
            if committee.all_honest_final():
                ctx.sim.schedule(lambda: finish(committee, False), 0, "pbft:done")

        committee = Committee(ctx.sim, ctx.net, cfg, ctx.keys, ctx.round, views, scripts, self.timeout_ms,
                              ctx.barred, max_view=cfg.f + 1, on_progress=progress)
        committee.start()
        ctx.sim.schedule_at(deadline - 1, lambda: finish(committee, True), "pbft:deadline")
