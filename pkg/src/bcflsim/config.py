"""Experiment configuration: YAML in, validated dataclasses out.

Every field has a default, so a config file only lists what it changes. Errors
are collected across the whole document and reported with dotted field paths.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONSENSUS_KINDS = ("poq", "pofl", "flpbft")
TOPOLOGIES = ("centralized", "hierarchical", "decentralized")
TRUST_MODELS = ("permissionless", "consortium", "permissioned")
BEHAVIORS = ("sign-flip", "scale", "gaussian-noise", "accuracy-spoof", "none")
DATASET_KINDS = ("mnist5k", "idx", "synthetic")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass
class TopologyConfig:
    variant: str = "centralized"
    cluster_size: int = 3
    clusters: int | None = None
    overlay_degree: int = 4


@dataclass
class ConsensusConfig:
    kind: str = "poq"
    params: dict = field(default_factory=dict)   # forwarded to the engine constructor
    committee_size: int | None = None


@dataclass
class TrustConfig:
    model: str = "permissionless"
    stake_minimum: float = 1.0
    default_stake: float = 10.0
    stakes: dict = field(default_factory=dict)           # node -> stake
    approvers: list = field(default_factory=list)        # consortium approver ids
    approvers_required: int = 2
    approvals: dict = field(default_factory=dict)        # node -> approver ids that sign for it
    roles: dict = field(default_factory=dict)            # node -> role certificate
    default_role: str | None = "trainer"
    role_table: list = field(default_factory=lambda: ["data-provider", "trainer", "aggregator", "validator"])


@dataclass
class AdversaryConfig:
    byzantine_fraction: float = 0.0
    behavior: str = "sign-flip"
    factor: float = 20.0
    sigma: float = 1.0
    delta: float = 0.3
    seed: int | None = None


@dataclass
class DatasetConfig:
    kind: str = "mnist5k"
    path: str | None = None
    images: str | None = None
    labels: str | None = None
    classes: int = 10
    dims: int = 784
    per_class: int = 500
    spread: float = 0.1

    def source(self, seed: int) -> dict:
        if self.kind == "synthetic":
            return {"kind": "synthetic", "classes": self.classes, "dims": self.dims,
                    "per_class": self.per_class, "spread": self.spread, "seed": seed}
        out: dict[str, Any] = {"kind": self.kind}
        for k in ("path", "images", "labels"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out


@dataclass
class PartitionConfig:
    classes_per_node: int = 2
    validation_fraction: float = 0.1
    local_test_fraction: float = 0.2
    samples_per_round: int = 500


@dataclass
class TrainSection:
    lr: float = 0.1
    epochs: int = 2
    batch: int = 32
    hidden: int = 32
    train_time_ms: list = field(default_factory=lambda: [18_000, 22_000])


@dataclass
class PartitionWindowConfig:
    side_a: list = field(default_factory=list)
    side_b: list = field(default_factory=list)
    start_ms: int = 0
    end_ms: int = 0


@dataclass
class NetworkSection:
    base_latency_ms: int = 50
    jitter_ms: int = 20
    drop_probability: float = 0.0
    partitions: list[PartitionWindowConfig] = field(default_factory=list)


@dataclass
class CrashEvent:
    node: int | str = 0          # a participant id or "coordinator"
    round: int = 1
    recover_round: int | None = None


@dataclass
class DelayEvent:
    node: int = 0
    round: int = 1
    extra_ms: int = 0


@dataclass
class ScheduleConfig:
    joins: dict = field(default_factory=dict)     # node -> first round it participates
    crashes: list[CrashEvent] = field(default_factory=list)
    delays: list[DelayEvent] = field(default_factory=list)
    inter_round_pause: bool = False
    pause_ms: list = field(default_factory=lambda: [120_000, 240_000])
    phase_ms: int = 2_000


@dataclass
class StorageConfig:
    replicas: int = 3
    failure_probability: float = 0.0
    cache_capacity: int = 4
    chunk_bytes: int = 4096


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    nodes: int = 5
    rounds: int = 10
    collection_window_ms: int = 180_000
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    trust: TrustConfig = field(default_factory=TrustConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    train: TrainSection = field(default_factory=TrainSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    storage: StorageConfig = field(default_factory=StorageConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        """Copy with dotted-path overrides, e.g. replace(**{"consensus.kind": "pofl"})."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            *head, last = path.split(".")
            for key in head:
                node = node[key]
            node[last] = value
        return from_dict(data)


# --- building and validation -------------------------------------------------------

def _check_type(value: Any, tp: Any, path: str, errors: list[str]) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            sub: list[str] = []
            out = _check_type(value, a, path, sub)
            if not sub:
                return out
        errors.append(f"{path}: expected {tp}, got {value!r}")
        return value
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, errors)
    if origin is list:
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {type(value).__name__}")
            return []
        (item,) = typing.get_args(tp) or (Any,)
        return [_check_type(v, item, f"{path}[{i}]", errors) for i, v in enumerate(value)]
    if tp is list:
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {type(value).__name__}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a mapping, got {type(value).__name__}")
            return {}
        return value
    if tp is bool:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str, errors: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            errors.append(f"{path + '.' if path else ''}{key}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _check_type(data[f.name], hints[f.name], f"{path + '.' if path else ''}{f.name}", errors)
    return cls(**kwargs)


def _validate(c: ExperimentConfig, errors: list[str]) -> None:
    def need(ok: bool, path: str, msg: str) -> None:
        if not ok:
            errors.append(f"{path}: {msg}")

    need(c.rounds >= 1, "rounds", "must be >= 1")
    need(c.nodes >= 2, "nodes", "must be >= 2")
    need(c.collection_window_ms > 0, "collection_window_ms", "must be > 0")
    need(c.topology.variant in TOPOLOGIES, "topology.variant", f"must be one of {TOPOLOGIES}")
    need(c.topology.cluster_size >= 2, "topology.cluster_size", "must be >= 2")
    need(c.topology.clusters is None or c.topology.clusters >= 1, "topology.clusters", "must be >= 1")
    need(c.topology.overlay_degree >= 2, "topology.overlay_degree", "must be >= 2")
    need(c.consensus.kind in CONSENSUS_KINDS, "consensus.kind", f"must be one of {CONSENSUS_KINDS}")
    need(not (c.topology.variant == "decentralized" and c.consensus.kind == "poq"), "consensus.kind",
         "decentralized topologies bind to pofl or flpbft")
    need(c.consensus.committee_size is None or c.consensus.committee_size >= 1,
         "consensus.committee_size", "must be >= 1")
    need(c.trust.model in TRUST_MODELS, "trust.model", f"must be one of {TRUST_MODELS}")
    if c.trust.model == "consortium":
        need(c.trust.approvers_required >= 2, "trust.approvers_required", "consortium needs >= 2")
    if c.trust.model == "permissioned":
        need(bool(c.trust.role_table), "trust.role_table", "must not be empty")
    need(0.0 <= c.adversary.byzantine_fraction <= 1.0, "adversary.byzantine_fraction", "must lie in [0, 1]")
    need(c.adversary.behavior in BEHAVIORS, "adversary.behavior", f"must be one of {BEHAVIORS}")
    need(c.adversary.factor > 0, "adversary.factor", "must be > 0")
    need(c.dataset.kind in DATASET_KINDS, "dataset.kind", f"must be one of {DATASET_KINDS}")
    if c.dataset.kind == "idx":
        need(c.dataset.path is not None or (c.dataset.images is not None and c.dataset.labels is not None),
             "dataset.path", "idx datasets need a path or images+labels")
    if c.dataset.kind == "synthetic":
        need(c.dataset.classes >= 2, "dataset.classes", "must be >= 2")
        need(c.dataset.per_class >= 1, "dataset.per_class", "must be >= 1")
        need(c.dataset.spread > 0, "dataset.spread", "must be > 0")
    need(c.partition.classes_per_node >= 1, "partition.classes_per_node", "must be >= 1")
    need(0 < c.partition.validation_fraction < 1, "partition.validation_fraction", "must lie in (0, 1)")
    need(0 < c.partition.local_test_fraction < 1, "partition.local_test_fraction", "must lie in (0, 1)")
    need(c.partition.samples_per_round >= 1, "partition.samples_per_round", "must be >= 1")
    need(c.train.lr > 0, "train.lr", "must be > 0")
    need(c.train.epochs >= 1, "train.epochs", "must be >= 1")
    need(c.train.batch >= 1, "train.batch", "must be >= 1")
    need(c.train.hidden >= 1, "train.hidden", "must be >= 1")
    tt = c.train.train_time_ms
    need(len(tt) == 2 and all(isinstance(x, int) for x in tt) and 0 <= tt[0] <= tt[1],
         "train.train_time_ms", "must be [low, high] integers with 0 <= low <= high")
    need(c.network.base_latency_ms >= 0, "network.base_latency_ms", "must be >= 0")
    need(c.network.jitter_ms >= 0, "network.jitter_ms", "must be >= 0")
    need(0.0 <= c.network.drop_probability <= 1.0, "network.drop_probability", "must lie in [0, 1]")
    for i, p in enumerate(c.network.partitions):
        need(p.start_ms <= p.end_ms, f"network.partitions[{i}]", "start_ms must not exceed end_ms")
    for node, r in c.schedule.joins.items():
        need(isinstance(node, int) and 0 <= node < c.nodes, f"schedule.joins.{node}", "unknown node")
        need(isinstance(r, int) and r >= 1, f"schedule.joins.{node}", "join round must be >= 1")
    for i, ev in enumerate(c.schedule.crashes):
        need(ev.node == "coordinator" or (isinstance(ev.node, int) and 0 <= ev.node < c.nodes),
             f"schedule.crashes[{i}].node", "must be a node id or 'coordinator'")
        need(ev.recover_round is None or ev.recover_round > ev.round,
             f"schedule.crashes[{i}].recover_round", "must come after the crash round")
    for i, ev in enumerate(c.schedule.delays):
        need(0 <= ev.node < c.nodes, f"schedule.delays[{i}].node", "unknown node")
        need(ev.extra_ms >= 0, f"schedule.delays[{i}].extra_ms", "must be >= 0")
    pm = c.schedule.pause_ms
    need(len(pm) == 2 and 0 <= pm[0] <= pm[1], "schedule.pause_ms", "must be [low, high] with low <= high")
    need(c.schedule.phase_ms > 0, "schedule.phase_ms", "must be > 0")
    need(c.storage.replicas >= 1, "storage.replicas", "must be >= 1")
    need(0.0 <= c.storage.failure_probability <= 1.0, "storage.failure_probability", "must lie in [0, 1]")
    need(c.storage.cache_capacity >= 1, "storage.cache_capacity", "must be >= 1")
    need(c.storage.chunk_bytes >= 8, "storage.chunk_bytes", "must be >= 8")


def from_dict(data: Any) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, data, "", errors)
    if not errors:
        _validate(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError([f"<file>: cannot read {path}: {e.strerror}"]) from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError([f"<file>: not valid YAML: {e}"]) from e
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
