"""Experiment driver: trains nodes, routes each round over the chosen topology,
commits through the chosen consensus and records metrics, chain and audit trail."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config
from .consensus import FLPBFTEngine, PoFLEngine, PoQEngine
from .consensus.base import ConsensusEngine, RoundContext
from .crypto import KeyRing
from .datasets import load_dataset
from .learning import (Dataset, DatasetPartition, ModelParams, TrainConfig, UpdateRecord, as_partition,
                       cross_entropy, evaluate, init_params, local_train, partition_non_iid)
from .simnet import Network, NetworkConfig, PartitionWindow, Simulator, node_rng
from .storage import (AuditLog, ContentStore, Ledger, ModelCache, OnChainRecord, RoundAuditRecord,
                      TieredStore)
from .topology import COORDINATOR, RoundInputs, Router, TopologyKind, build_topology
from .trust import (AdmissionPolicy, AdversarySpec, Credentials, ReputationTable, admit, apply_adversary,
                    approve, select_byzantine, sign_update)


def _seed(seed: int, node: int, stream: str) -> int:
    return int(node_rng(seed, node, stream).integers(0, 2**31 - 1))


def make_engine(cfg: ExperimentConfig) -> ConsensusEngine:
    params = dict(cfg.consensus.params)
    kind = cfg.consensus.kind
    try:
        if kind == "poq":
            return PoQEngine(**params)
        if kind == "pofl":
            if "target_log2" in params:
                params["target"] = 1 << int(params.pop("target_log2"))
            return PoFLEngine(**params)
        return FLPBFTEngine(**params)
    except (TypeError, ValueError) as e:
        raise ConfigError([f"consensus.params: {e}"]) from e


@dataclass
class MetricsRow:
    round: int
    committed: bool
    reason: str
    participants: list[int]
    local_accuracy: dict[str, float]
    update_accuracy: dict[str, float]
    global_score: float
    messages: dict[str, int]
    messages_total: int
    coordination_messages: int
    global_layer_messages: int
    duration_ms: int
    model_root: str | None
    leader: int | None
    view: int
    suspects: list[int]
    excluded: list[int]
    late: list[int]
    rewards: dict[str, int]
    reputation: dict[str, float]
    admitted: list[int] = field(default_factory=list)
    rejected: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    ledger: Ledger
    audit: AuditLog
    model: ModelParams
    byzantine: frozenset[int]


@dataclass
class _Node:
    node: int
    train: DatasetPartition
    test: DatasetPartition
    model: ModelParams
    join_round: int
    admitted: bool | None = None


def _split_data(ds: Dataset, cfg: ExperimentConfig) -> tuple[DatasetPartition, list[DatasetPartition]]:
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(ds))
    n_val = int(round(len(ds) * cfg.partition.validation_fraction))
    val_rows = np.sort(perm[:n_val])
    rest = np.sort(perm[n_val:])
    val = as_partition(ds, val_rows)
    pool = Dataset(ds.features[rest], ds.labels[rest])
    parts = partition_non_iid(pool, cfg.nodes, cfg.partition.classes_per_node, cfg.seed)
    return val, parts


def _credentials(node: int, cfg: ExperimentConfig, keys: KeyRing) -> Credentials:
    t = cfg.trust
    if t.model == "permissionless":
        return Credentials(node, stake=t.stakes.get(node, t.default_stake))
    if t.model == "consortium":
        signers = t.approvals.get(node, t.approvers)
        return Credentials(node, approvals=tuple(approve(keys, a, node) for a in signers))
    return Credentials(node, certificate=t.roles.get(node, t.default_role))


def _policy(cfg: ExperimentConfig) -> AdmissionPolicy:
    t = cfg.trust
    return AdmissionPolicy(t.model, t.stake_minimum, frozenset(t.approvers), t.approvers_required,
                           frozenset(t.role_table))


class Experiment:
    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.engine = make_engine(cfg)
        self.kind = TopologyKind(cfg.topology.variant, cfg.topology.cluster_size, cfg.topology.clusters,
                                 cfg.topology.overlay_degree)
        self.sim = Simulator()
        windows = tuple(PartitionWindow(frozenset(p.side_a), frozenset(p.side_b), p.start_ms, p.end_ms)
                        for p in cfg.network.partitions)
        self.net = Network(self.sim, NetworkConfig(cfg.network.base_latency_ms, cfg.network.jitter_ms,
                                                   cfg.network.drop_probability, windows, cfg.seed))
        for x in range(cfg.nodes):
            self.net.add_node(x)
        self.net.add_node(COORDINATOR)
        self.router = Router(self.sim, self.net)
        self.keys = KeyRing(cfg.seed)
        self.ledger = Ledger()
        self.audit = AuditLog()
        self.dht = ContentStore(cfg.storage.replicas, cfg.storage.failure_probability, cfg.seed)
        self.store = TieredStore(self.dht, ModelCache(cfg.storage.cache_capacity), cfg.storage.chunk_bytes)
        self.reputation = ReputationTable()
        self.policy = _policy(cfg)

        ds = load_dataset(cfg.dataset.source(cfg.seed))
        self.val, parts = _split_data(ds, cfg)
        self.global_model = init_params([ds.dims, cfg.train.hidden, max(ds.classes) + 1], cfg.seed)
        self.global_score = evaluate(self.global_model, self.val)
        self.nodes: dict[int, _Node] = {}
        for x, part in enumerate(parts):
            train, test = part.split(cfg.partition.local_test_fraction, node_rng(cfg.seed, x, "split"))
            self.nodes[x] = _Node(x, train, test, self.global_model, int(cfg.schedule.joins.get(x, 1)))
        adv = cfg.adversary
        self.adversary = AdversarySpec(adv.byzantine_fraction, adv.behavior, adv.factor, adv.sigma, adv.delta,
                                       cfg.seed if adv.seed is None else adv.seed)
        self.byzantine = select_byzantine(range(cfg.nodes), self.adversary) \
            if adv.behavior != "none" else frozenset()

    # --- per-round pieces -----------------------------------------------------------

    def _apply_schedule(self, r: int) -> tuple[list[int], dict[str, str]]:
        for ev in self.cfg.schedule.crashes:
            target = COORDINATOR if ev.node == "coordinator" else ev.node
            if ev.round == r:
                self.net.crash(target)
            if ev.recover_round == r:
                self.net.recover(target)
        admitted, rejected = [], {}
        for n in self.nodes.values():
            if n.join_round == r and n.admitted is None:
                verdict = admit(_credentials(n.node, self.cfg, self.keys), self.policy, self.keys)
                n.admitted = verdict.accepted
                if verdict.accepted:
                    n.model = self.global_model  # joiners start from the current global model
                    admitted.append(n.node)
                else:
                    rejected[str(n.node)] = verdict.reason
        return admitted, rejected

    def _active(self) -> list[int]:
        return [x for x, n in sorted(self.nodes.items()) if n.admitted and self.net.alive(x)]

    def _train(self, r: int, active: list[int]) -> dict[int, tuple[UpdateRecord, int]]:
        cfg = self.cfg
        lo, hi = cfg.train.train_time_ms
        extra = {(d.node, d.round): d.extra_ms for d in cfg.schedule.delays}
        out = {}
        for x in active:
            n = self.nodes[x]
            part = n.train.sample(cfg.partition.samples_per_round, node_rng(cfg.seed, x, f"slice:{r}"))
            tcfg = TrainConfig(cfg.train.lr, cfg.train.epochs, cfg.train.batch, _seed(cfg.seed, x, f"train:{r}"))
            params, loss = local_train(n.model, part, tcfg)
            u = UpdateRecord(x, params, part.sample_count, loss, evaluate(params, self.val), round=r,
                             val_loss=cross_entropy(params, self.val.features, self.val.labels))
            u = sign_update(u, self.keys)
            if x in self.byzantine:
                u = apply_adversary(u, self.adversary, self.keys, _seed(cfg.seed, x, f"adv:{r}"))
            ready = int(node_rng(cfg.seed, x, f"time:{r}").integers(lo, hi + 1)) + extra.get((x, r), 0)
            out[x] = (u, ready)
        return out

    def _validators(self, r: int, active: list[int]) -> list[int]:
        k = self.cfg.consensus.committee_size
        if k is None or k >= len(active):
            return list(active)
        rng = node_rng(self.cfg.seed, 0, f"committee:{r}")
        return sorted(int(active[i]) for i in rng.permutation(len(active))[:k])

    def _context(self, r: int):
        def make(contributions: list[UpdateRecord], validators: list[int]) -> RoundContext:
            return RoundContext(self.sim, self.net, r, contributions, validators, self.keys, self.global_model,
                                self.val, self.byzantine, self.reputation.barred(), self.adversary, self.dht,
                                seed=_seed(self.cfg.seed, 0, f"consensus:{r}"))
        return make

    def run_round(self, r: int) -> MetricsRow:
        cfg = self.cfg
        admitted, rejected = self._apply_schedule(r)
        active = self._active()
        barred = self.reputation.barred()
        notes: list[str] = []
        # the plan spans every admitted node, crashed or not; crashed ones just stay silent
        plan_nodes = [x for x, n in sorted(self.nodes.items()) if n.admitted]
        if len(plan_nodes) < 2:
            plan_nodes = sorted(self.nodes)
        plan = build_topology(self.kind, plan_nodes, _seed(cfg.seed, 0, f"overlay:{r}"), barred)
        updates = self._train(r, active)
        inputs = RoundInputs(r, updates, self.engine, self._context(r), self._validators(r, active),
                             cfg.collection_window_ms, cfg.schedule.phase_ms)
        res = self.router.route_round(plan, inputs)
        out = res.outcome
        notes += res.notes

        participants: list[int] = []
        root_hex = None
        if out.committed:
            by_owner = {u.node: u for u in res.contributions}
            for o in out.included:
                u = by_owner.get(o)
                participants.extend(u.members or (o,) if u is not None else (o,))
            participants = sorted(set(participants))
            self.global_model = out.model
            self.global_score = evaluate(out.model, self.val)
            root, manifest = self.store.store_model(out.model, r)
            self.store.cache.on_commit(r)
            self.store.cache.put(root, out.model, r)
            audit = RoundAuditRecord(r, tuple((p, self.keys.fingerprint(p)) for p in participants), root,
                                     self.global_score, self.sim.now)
            self.audit.append(audit)
            record = OnChainRecord(r, root, tuple(participants), {
                "audit_digest": audit.digest().hex(), "consensus": cfg.consensus.kind,
                "global_score": self.global_score, "leader": out.leader, "manifest": manifest.hex(),
                "suspects": list(out.suspects), "view": out.view,
            }, self.sim.now)
            self.ledger.append_block(record)
            root_hex = root.hex()
            for x in res.received_model:
                if x in self.nodes:
                    self.nodes[x].model = self.store.load_model(root)

        for owner in sorted({u.node for u in res.contributions}):
            if owner in out.suspects:
                self.reputation.record(owner, "flagged-by-detector")
            elif owner in out.excluded:
                self.reputation.record(owner, "excluded-by-vote")
            elif out.committed and owner in out.included:
                self.reputation.record(owner, "honest-contribution")

        local_acc = {str(x): evaluate(self.nodes[x].model, self.nodes[x].test) for x in active}
        update_acc = {str(x): evaluate(u.params, self.nodes[x].test) for x, (u, _) in sorted(updates.items())}
        duration = res.duration_ms
        if cfg.schedule.inter_round_pause and r < cfg.rounds:
            lo, hi = cfg.schedule.pause_ms
            pause = int(node_rng(cfg.seed, 0, f"pause:{r}").integers(lo, hi + 1))
            self.sim.run_until(self.sim.now + pause)
        return MetricsRow(
            round=r, committed=out.committed, reason=out.reason, participants=participants,
            local_accuracy=local_acc, update_accuracy=update_acc, global_score=self.global_score,
            messages=res.counts, messages_total=res.total(), coordination_messages=res.coordination(),
            global_layer_messages=res.global_layer(), duration_ms=duration, model_root=root_hex,
            leader=out.leader, view=out.view, suspects=list(out.suspects), excluded=list(out.excluded),
            late=list(res.late), rewards={str(k): v for k, v in sorted(out.rewards.items())},
            reputation=self.reputation.snapshot(), admitted=admitted, rejected=rejected, notes=notes)

    def run(self) -> ExperimentResult:
        rows = [self.run_round(r) for r in range(1, self.cfg.rounds + 1)]
        return ExperimentResult(self.cfg, rows, self.ledger, self.audit, self.global_model, self.byzantine)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    return Experiment(cfg).run()


def summary_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "global_score", "messages_total", "duration_ms"])
    for row in rows:
        w.writerow([row.round, repr(row.global_score), row.messages_total, row.duration_ms])
    return buf.getvalue()


def emit_metrics(rows: list[MetricsRow], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.jsonl", "summary": out / "summary.csv"}
    paths["metrics"].write_text("".join(r.to_json() + "\n" for r in rows))
    paths["summary"].write_text(summary_csv(rows))
    return paths


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    paths = emit_metrics(result.rows, out_dir)
    out = Path(out_dir)
    paths["chain"] = out / "chain.hex"
    paths["audit"] = out / "audit.jsonl"
    paths["config"] = out / "config.yaml"
    paths["chain"].write_text(result.ledger.dump())
    paths["audit"].write_text(result.audit.to_jsonl())
    paths["config"].write_text(dump_config(result.config))
    return paths


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def summarize(rows: list[dict]) -> dict:
    committed = [r for r in rows if r["committed"]]
    return {
        "rounds": len(rows),
        "committed": len(committed),
        "final_global_score": rows[-1]["global_score"] if rows else math.nan,
        "messages_total": sum(r["messages_total"] for r in rows),
        "duration_ms": sum(r["duration_ms"] for r in rows),
    }
