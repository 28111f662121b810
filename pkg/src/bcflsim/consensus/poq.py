"""Proof of Quality: accuracy-ranked leader election with a re-evaluating validator vote."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

from ..crypto import KeyRing
from ..learning import DatasetPartition, ModelParams, UpdateRecord, evaluate, fedavg
from ..simnet import Message
from ..storage import model_root
from .base import ConsensusOutcome, Done, RoundContext

ACCURACY_TOLERANCE = 0.05
CLAIM_TOLERANCE = 1e-9
_RECORD = struct.Struct(">qd32s32s")


class NoLeader(Exception):
    pass


@dataclass(frozen=True)
class QualityProof:
    node: int
    accuracy: float
    model_hash: bytes
    signature: bytes

    def body(self) -> bytes:
        return proof_body(self.node, self.accuracy, self.model_hash)

    def to_bytes(self) -> bytes:
        record = _RECORD.pack(self.node, self.accuracy, self.model_hash, self.signature)
        return struct.pack(">I", len(record)) + record

    @classmethod
    def from_bytes(cls, data: bytes) -> QualityProof:
        (n,) = struct.unpack_from(">I", data, 0)
        if n != _RECORD.size or len(data) < 4 + n:
            raise ValueError("malformed proof record")
        node, acc, h, sig = _RECORD.unpack_from(data, 4)
        return cls(node, acc, h, sig)


def proof_body(node: int, accuracy: float, model_hash: bytes) -> bytes:
    return b"poq" + struct.pack(">qd", node, accuracy) + model_hash


def make_proof(node: int, accuracy: float, model_hash: bytes, keys: KeyRing) -> QualityProof:
    return QualityProof(node, accuracy, model_hash, keys.sign(node, proof_body(node, accuracy, model_hash)))


def submit_proof(node: int, model: ModelParams, val_set: DatasetPartition, keys: KeyRing) -> QualityProof:
    return make_proof(node, evaluate(model, val_set), model_root(model), keys)


def proof_signature_ok(proof: QualityProof, keys: KeyRing) -> bool:
    return keys.verify(proof.node, proof.body(), proof.signature)


def select_leader(proofs: Iterable[QualityProof], keys: KeyRing, barred: frozenset[int] = frozenset()) -> int:
    """Highest accuracy among validly signed proofs; ties go to the lowest node id."""
    valid = [p for p in proofs if proof_signature_ok(p, keys) and p.node not in barred]
    if not valid:
        raise NoLeader("no valid proof this round")
    return min(valid, key=lambda p: (-p.accuracy, p.node)).node


def quorum(n: int) -> int:
    return (2 * n) // 3 + 1


class VoteResult(NamedTuple):
    accepted: bool
    accepts: int
    needed: int


def tally(votes: Mapping[int, bool], n: int) -> VoteResult:
    accepts = sum(1 for v in votes.values() if v)
    return VoteResult(accepts >= quorum(n), accepts, quorum(n))


def validator_vote(proposal: ModelParams, updates: list[UpdateRecord], val_set: DatasetPartition,
                   tolerance: float = ACCURACY_TOLERANCE) -> bool:
    """Accept iff the proposal is exactly the FedAvg of `updates` and it validates
    no worse than the best participant minus the tolerance."""
    if not updates:
        return False
    if model_root(fedavg(updates)) != model_root(proposal):
        return False
    best = max(evaluate(u.params, val_set) for u in updates)
    return evaluate(proposal, val_set) >= best - tolerance


def verify_aggregation(proposal: ModelParams, updates: list[UpdateRecord], validators: Iterable[int],
                       val_set: DatasetPartition, byzantine: frozenset[int] = frozenset(),
                       tolerance: float = ACCURACY_TOLERANCE) -> VoteResult:
    validators = list(validators)
    honest_vote = validator_vote(proposal, updates, val_set, tolerance)
    votes = {v: (not honest_vote if v in byzantine else honest_vote) for v in validators}
    return tally(votes, len(validators))


def verified_contributions(proofs: Mapping[int, QualityProof], contributions: list[UpdateRecord],
                           val_set: DatasetPartition, keys: KeyRing) -> tuple[list[UpdateRecord], list[int]]:
    """Keep contributions whose proof is signed, names the contributed model, and whose
    claimed accuracy survives re-evaluation on the shared validation set."""
    kept, rejected = [], []
    for u in contributions:
        p = proofs.get(u.node)
        ok = (p is not None and proof_signature_ok(p, keys) and p.model_hash == model_root(u.params)
              and abs(evaluate(u.params, val_set) - p.accuracy) <= CLAIM_TOLERANCE)
        (kept if ok else rejected).append(u if ok else u.node)
    return kept, rejected


def _corrupt(params: ModelParams) -> ModelParams:
    return ModelParams(tuple((-w, -b) for w, b in params.layers))


class PoQEngine:
    """Message flow: owners broadcast proofs -> validators re-evaluate and elect the
    leader -> leader proposes FedAvg of the verified set -> validators vote to the leader."""

    name = "poq"

    def __init__(self, phase_timeout_ms: int = 1000, tolerance: float = ACCURACY_TOLERANCE,
                 verify: bool = True) -> None:
        self.phase_timeout_ms = phase_timeout_ms
        self.tolerance = tolerance
        self.verify = verify

    def deadline_ms(self, ctx: RoundContext) -> int:
        return ctx.sim.now + 4 * self.phase_timeout_ms

    def start(self, ctx: RoundContext, on_done: Done) -> None:
        if not self.verify:
            self._start_unverified(ctx, on_done)
            return
        _PoQRound(self, ctx, on_done).start()

    def _start_unverified(self, ctx: RoundContext, on_done: Done) -> None:
        live = [u for u in ctx.contributions if ctx.net.alive(u.node)]
        if not live:
            on_done(ConsensusOutcome(False, reason="no contributions"))
            return
        model = fedavg(live)
        on_done(ConsensusOutcome(True, model, model_root(model), None, tuple(sorted(u.node for u in live)),
                                 reason="unverified"))


class _PoQRound:
    def __init__(self, engine: PoQEngine, ctx: RoundContext, on_done: Done) -> None:
        self.e = engine
        self.ctx = ctx
        self.on_done = on_done
        self.proofs: dict[int, dict[int, QualityProof]] = {v: {} for v in ctx.validators}
        self.votes: dict[int, bool] = {}
        self.finished = False
        self.leader: int | None = None
        self.proposal: tuple[ModelParams, list[UpdateRecord], list[int]] | None = None

    def start(self) -> None:
        ctx, net = self.ctx, self.ctx.net
        for v in ctx.validators:
            net.on(v, "poq_proof", self._on_proof)
            net.on(v, "poq_proposal", self._on_proposal)
            net.on(v, "poq_vote", self._on_vote)
        for u in ctx.contributions:
            if not net.alive(u.node):
                continue
            if ctx.honest(u.node):
                proof = submit_proof(u.node, u.params, ctx.val_set, ctx.keys)
            else:
                proof = make_proof(u.node, u.claimed_accuracy, model_root(u.params), ctx.keys)
            data = proof.to_bytes()
            if u.node in self.proofs:
                self.proofs[u.node][u.node] = proof
            net.broadcast(u.node, ctx.validators, data, "poq_proof", len(data))
        T = self.e.phase_timeout_ms
        ctx.sim.schedule(self._elect, T, "poq:elect")
        ctx.sim.schedule(self._deadline, 3 * T, "poq:deadline")

    def _on_proof(self, msg: Message) -> None:
        try:
            proof = QualityProof.from_bytes(msg.payload)
        except ValueError:
            return
        if proof.node == msg.src:
            self.proofs[msg.dst][proof.node] = proof

    def _elect(self) -> None:
        ctx = self.ctx
        for v in ctx.validators:
            if not ctx.net.alive(v):
                continue
            kept, rejected = verified_contributions(self.proofs[v], ctx.view_of(v), ctx.val_set, ctx.keys)
            try:
                leader = select_leader([self.proofs[v][u.node] for u in kept], ctx.keys, ctx.barred)
            except NoLeader:
                continue
            if leader == v:
                self._propose(v, kept, rejected)

    def _propose(self, leader: int, kept: list[UpdateRecord], rejected: list[int]) -> None:
        ctx = self.ctx
        model = fedavg(kept)
        if not ctx.honest(leader):
            model = _corrupt(model)
        root = model_root(model)
        self.leader = leader
        self.proposal = (model, kept, rejected)
        ids = [u.node for u in kept]
        body = root + struct.pack(f">qI{len(ids)}q", ctx.round, len(ids), *ids)
        payload = body + ctx.keys.sign(leader, body)
        self.votes[leader] = self._judge(leader, model, ids)
        ctx.net.broadcast(leader, ctx.validators, payload, "poq_proposal", len(payload) + model_size(model))

    def _judge(self, v: int, model: ModelParams, ids: list[int]) -> bool:
        ctx = self.ctx
        by_node = {u.node: u for u in ctx.view_of(v)}
        if any(i not in by_node for i in ids):
            verdict = False
        else:
            verdict = validator_vote(model, [by_node[i] for i in ids], ctx.val_set, self.e.tolerance)
        return verdict if ctx.honest(v) else not verdict

    def _on_proposal(self, msg: Message) -> None:
        ctx = self.ctx
        if self.proposal is None or msg.src != self.leader:
            return
        body, sig = msg.payload[:-32], msg.payload[-32:]
        if not ctx.keys.verify(msg.src, body, sig):
            return
        model, kept, _ = self.proposal
        accept = self._judge(msg.dst, model, [u.node for u in kept])
        vote = struct.pack(">q?", ctx.round, accept)
        ctx.net.send(msg.dst, msg.src, vote + ctx.keys.sign(msg.dst, vote), "poq_vote", len(vote) + 32)

    def _on_vote(self, msg: Message) -> None:
        ctx = self.ctx
        if self.finished or msg.dst != self.leader:
            return
        vote, sig = msg.payload[:-32], msg.payload[-32:]
        if not ctx.keys.verify(msg.src, vote, sig) or msg.src not in ctx.validators:
            return
        rnd, accept = struct.unpack(">q?", vote)
        if rnd != ctx.round:
            return
        self.votes[msg.src] = accept
        result = tally(self.votes, len(ctx.validators))
        if result.accepted:
            self._finish(True, "")

    def _deadline(self) -> None:
        if not self.finished:
            self._finish(False, "no leader" if self.leader is None else "quorum not reached")

    def _finish(self, committed: bool, reason: str) -> None:
        self.finished = True
        for kind in ("poq_proof", "poq_proposal", "poq_vote"):
            self.ctx.net.off(kind)
        result = tally(self.votes, len(self.ctx.validators))
        details = {"accepts": result.accepts, "needed": result.needed}
        if self.proposal is None:
            self.on_done(ConsensusOutcome(False, reason=reason, details=details))
            return
        model, kept, rejected = self.proposal
        self.on_done(ConsensusOutcome(
            committed, model if committed else None, model_root(model) if committed else None, self.leader,
            tuple(sorted(u.node for u in kept)), tuple(sorted(rejected)), reason=reason, details=details))


def model_size(model: ModelParams) -> int:
    return 8 * model.num_params
