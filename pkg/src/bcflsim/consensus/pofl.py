"""Proof of Federated Learning: hash mining whose target is eased by e^(-alpha*L)."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from decimal import ROUND_FLOOR, Context, Decimal
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from ..learning import DatasetPartition, ModelParams, UpdateRecord, cross_entropy, evaluate, fedavg
from ..simnet import Message, node_rng
from ..storage import ZERO_HASH, ContentStore, deserialize_params, model_root, serialize_params
from .base import ConsensusOutcome, Done, RoundContext

FIXED_BITS = 63
FIXED_ONE = 1 << FIXED_BITS
MAX_TARGET = (1 << 256) - 1
LOSS_TOLERANCE = 0.05
ROUND_REWARD = 1000
_DEC = Context(prec=60)
_EXACT = Context(prec=2000)  # wide enough for the exact product of two doubles


@dataclass(frozen=True)
class DifficultyParams:
    target: int
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.target <= MAX_TARGET:
            raise ValueError("target must lie in (0, 2^256)")
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be a finite non-negative number")


@dataclass(frozen=True)
class MiningBlock:
    prev_hash: bytes
    model_root: bytes
    train_loss: float
    miner: int
    nonce: int = 0
    noised_params_ref: bytes = ZERO_HASH

    def __post_init__(self) -> None:
        if not (math.isfinite(self.train_loss) and self.train_loss >= 0):
            raise ValueError("train_loss must be finite and non-negative")

    def header(self) -> bytes:
        return self.prev_hash + self.model_root + struct.pack(">dq", self.train_loss, self.miner)

    def hash(self) -> bytes:
        return hashlib.sha256(self.header() + struct.pack(">Q", self.nonce)).digest()

    def hash_int(self) -> int:
        return int.from_bytes(self.hash(), "big")

    def to_bytes(self) -> bytes:
        return self.header() + struct.pack(">Q", self.nonce) + self.noised_params_ref

    @classmethod
    def from_bytes(cls, data: bytes) -> MiningBlock:
        if len(data) != 32 + 32 + 8 + 8 + 8 + 32:
            raise ValueError("malformed mining block")
        loss, miner, nonce = struct.unpack_from(">dqQ", data, 64)
        return cls(data[:32], data[32:64], loss, miner, nonce, data[88:120])


def quality_factor(alpha: float, loss: float) -> int:
    """floor(e^(-alpha*loss) * 2^63), evaluated in decimal arithmetic.

    The product of the two doubles is formed exactly. Precision doubles until the
    floor is unambiguous, so values just below an integer are not rounded up."""
    x = _EXACT.multiply(Decimal(alpha), Decimal(loss))
    if x == 0:
        return FIXED_ONE
    prec = _DEC.prec
    while True:
        ctx = Context(prec=prec)
        y = ctx.multiply(ctx.exp(-x), FIXED_ONE)
        if y == 0:
            return 0
        f = int(y.to_integral_value(rounding=ROUND_FLOOR))
        slack = Decimal(10) ** (y.adjusted() - prec + 3)
        if ctx.subtract(y, f) > slack and ctx.subtract(f + 1, y) > slack:
            return f
        prec *= 2


def adjusted_target(d: DifficultyParams, loss: float) -> int:
    if loss < 0:
        raise ValueError("loss must be non-negative")
    return (d.target * quality_factor(d.alpha, loss)) >> FIXED_BITS


class MiningResult(NamedTuple):
    nonce: int | None
    attempts: int

    @property
    def found(self) -> bool:
        return self.nonce is not None


def mine(block: MiningBlock, d: DifficultyParams, max_attempts: int, rng: np.random.Generator) -> MiningResult:
    """Try sequential nonces from a seeded start until one hashes below the eased
    target. Returns nonce None when the budget runs out or the target is zero."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    threshold = adjusted_target(d, block.train_loss)
    if threshold == 0:
        return MiningResult(None, 0)
    prefix = hashlib.sha256(block.header())
    start = int(rng.integers(0, 1 << 64, dtype=np.uint64))
    for i in range(max_attempts):
        nonce = (start + i) & 0xFFFFFFFFFFFFFFFF
        h = prefix.copy()
        h.update(nonce.to_bytes(8, "big"))
        if int.from_bytes(h.digest(), "big") < threshold:
            return MiningResult(nonce, i + 1)
    return MiningResult(None, max_attempts)


def _scaled_key(b: MiningBlock, d: DifficultyParams) -> tuple[int, int]:
    # H / f compared as H * 2^63 / factor; returned as a fraction for cross-multiplication
    return b.hash_int() * FIXED_ONE, max(1, quality_factor(d.alpha, b.train_loss))


def select_winner(blocks: Iterable[MiningBlock], d: DifficultyParams) -> MiningBlock:
    """Block with the smallest hash scaled up by e^(alpha*L); lowest miner id on ties."""
    best = None
    best_key = None
    for b in blocks:
        num, den = _scaled_key(b, d)
        if best is None:
            best, best_key = b, (num, den)
            continue
        lhs, rhs = num * best_key[1], best_key[0] * den
        if lhs < rhs or (lhs == rhs and b.miner < best.miner):
            best, best_key = b, (num, den)
    if best is None:
        raise ValueError("no block this round")
    return best


def verify_block(b: MiningBlock, published: Mapping[bytes, ModelParams], d: DifficultyParams,
                 val_set: DatasetPartition, loss_tolerance: float = LOSS_TOLERANCE) -> bool:
    params = published.get(b.noised_params_ref)
    if params is None:
        return False
    if b.hash_int() >= adjusted_target(d, b.train_loss):
        return False
    if model_root(params) != b.model_root:
        return False
    loss = cross_entropy(params, val_set.features, val_set.labels)
    return abs(loss - b.train_loss) <= loss_tolerance


def distribute_rewards(updates: list[UpdateRecord], val_set: DatasetPartition, winner: int,
                       reward: int = ROUND_REWARD) -> dict[int, int]:
    """Split `reward` by leave-one-out accuracy gain; the integer remainder goes to the winner."""
    if not updates:
        return {}
    nodes = [u.node for u in updates]
    if len(updates) == 1:
        return {nodes[0]: reward}
    full = evaluate(fedavg(updates), val_set)
    gains = []
    for i in range(len(updates)):
        rest = updates[:i] + updates[i + 1:]
        gains.append(max(0.0, full - evaluate(fedavg(rest), val_set)))
    total = math.fsum(gains)
    if total > 0:
        shares = {n: int(reward * g / total) for n, g in zip(nodes, gains)}
    else:
        shares = {n: reward // len(nodes) for n in nodes}
    shares[winner] = shares.get(winner, 0) + reward - sum(shares.values())
    return shares


def publish(store: ContentStore, params: ModelParams) -> bytes:
    return store.put(serialize_params(params))


class PoFLEngine:
    """Each contribution owner mines one block over its update; validators check
    blocks on arrival and at the deadline pick the winner. The committed model is
    the FedAvg of every update whose block validated."""

    name = "pofl"

    def __init__(self, target: int = 1 << 248, alpha: float = 1.0, max_attempts: int = 1_000_000,
                 attempt_us: float = 20.0, mining_deadline_ms: int = 5000, reward: int = ROUND_REWARD,
                 loss_tolerance: float = LOSS_TOLERANCE) -> None:
        self.difficulty = DifficultyParams(target, alpha)
        self.max_attempts = max_attempts
        self.attempt_us = attempt_us
        self.mining_deadline_ms = mining_deadline_ms
        self.reward = reward
        self.loss_tolerance = loss_tolerance
        self.tip: bytes = ZERO_HASH
        self.chain: list[MiningBlock] = []

    def deadline_ms(self, ctx: RoundContext) -> int:
        return ctx.sim.now + self.mining_deadline_ms + 1

    def start(self, ctx: RoundContext, on_done: Done) -> None:
        _PoFLRound(self, ctx, on_done).start()


class _PoFLRound:
    def __init__(self, engine: PoFLEngine, ctx: RoundContext, on_done: Done) -> None:
        self.e = engine
        self.ctx = ctx
        self.on_done = on_done
        self.store = ctx.dht if ctx.dht is not None else ContentStore(seed=ctx.seed)
        self.valid: dict[int, dict[int, MiningBlock]] = {v: {} for v in ctx.validators}
        self.invalid: set[int] = set()
        self.attempts: dict[int, int] = {}

    def start(self) -> None:
        ctx, e = self.ctx, self.e
        for v in ctx.validators:
            ctx.net.on(v, "pofl_block", self._on_block)
        for u in ctx.contributions:
            if not ctx.net.alive(u.node):
                continue
            ref = publish(self.store, u.params)
            if ctx.honest(u.node):
                loss = cross_entropy(u.params, ctx.val_set.features, ctx.val_set.labels)
            else:
                loss = u.val_loss
            block = MiningBlock(e.tip, model_root(u.params), float(loss), u.node, 0, ref)
            res = mine(block, e.difficulty, e.max_attempts, node_rng(ctx.seed, u.node, f"mine:{ctx.round}"))
            self.attempts[u.node] = res.attempts
            if not res.found:
                continue
            delay = math.ceil(res.attempts * e.attempt_us / 1000)
            if delay > e.mining_deadline_ms:
                continue
            mined = replace(block, nonce=res.nonce)
            ctx.sim.schedule(lambda b=mined: self._announce(b), delay, f"pofl:mined:{u.node}")
        ctx.sim.schedule(self._close, e.mining_deadline_ms, "pofl:close")

    def _announce(self, b: MiningBlock) -> None:
        data = b.to_bytes()
        if b.miner in self.valid:
            self._check(b.miner, b)
        self.ctx.net.broadcast(b.miner, self.ctx.validators, data, "pofl_block", len(data))

    def _on_block(self, msg: Message) -> None:
        try:
            b = MiningBlock.from_bytes(msg.payload)
        except ValueError:
            return
        if b.miner == msg.src:
            self._check(msg.dst, b)

    def _check(self, validator: int, b: MiningBlock) -> None:
        if b.prev_hash != self.e.tip:
            return
        try:
            params = deserialize_params(self.store.get(b.noised_params_ref), self.ctx.reference.shapes)
        except Exception:
            params = None
        published = {b.noised_params_ref: params} if params is not None else {}
        if verify_block(b, published, self.e.difficulty, self.ctx.val_set, self.e.loss_tolerance):
            self.valid[validator][b.miner] = b
        else:
            self.invalid.add(b.miner)

    def _close(self) -> None:
        ctx, e = self.ctx, self.e
        ctx.net.off("pofl_block")
        # every live validator picks a winner from what it saw; plurality decides
        picks: dict[bytes, list[int]] = {}
        blocks: dict[bytes, MiningBlock] = {}
        for v in ctx.validators:
            if not ctx.net.alive(v) or not self.valid[v]:
                continue
            w = select_winner(self.valid[v].values(), e.difficulty)
            picks.setdefault(w.hash(), []).append(v)
            blocks[w.hash()] = w
        details = {"attempts": {str(k): a for k, a in sorted(self.attempts.items())}}
        if not picks:
            self.on_done(ConsensusOutcome(False, reason="no valid block", details=details,
                                          excluded=tuple(sorted(self.invalid))))
            return
        win_hash = min(picks, key=lambda h: (-len(picks[h]), blocks[h].miner))
        winner = blocks[win_hash]
        view = self.valid[picks[win_hash][0]]
        by_node = {u.node: u for u in ctx.contributions}
        included = [by_node[m] for m in sorted(view) if m in by_node]
        model = fedavg(included)
        e.tip = win_hash
        e.chain.append(winner)
        rewards = distribute_rewards(included, ctx.val_set, winner.miner, e.reward)
        details["winner_hash"] = win_hash.hex()
        self.on_done(ConsensusOutcome(
            True, model, model_root(model), winner.miner, tuple(u.node for u in included),
            tuple(sorted(self.invalid - set(view))), rewards=rewards, details=details))
