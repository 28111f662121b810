"""Coordination structures (centralized star, two-level hierarchy, peer overlay)
and the per-round router that moves updates and models over them."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import networkx as nx

from .consensus.base import ConsensusEngine, ConsensusOutcome, RoundContext
from .learning import ModelParams, UpdateRecord, pre_aggregate
from .simnet import Message, Network, Simulator

COORDINATOR = 1_000_000
COORDINATION_KINDS = ("update_up", "regional_up", "global_down", "model_down", "gossip")
GLOBAL_LAYER_KINDS = ("regional_up", "global_down")
OVERLAY_RETRIES = 10
UPDATE_OVERHEAD_BYTES = 128

Variant = Literal["centralized", "hierarchical", "decentralized"]


class TopologyError(Exception):
    pass


@dataclass(frozen=True)
class TopologyKind:
    variant: Variant = "centralized"
    cluster_size: int = 3
    clusters: int | None = None     # fixes the region count instead of the region size
    overlay_degree: int = 4

    def __post_init__(self) -> None:
        if self.variant not in ("centralized", "hierarchical", "decentralized"):
            raise ValueError(f"unknown topology {self.variant!r}")
        if self.cluster_size < 2:
            raise ValueError("cluster_size must be at least 2")
        if self.clusters is not None and self.clusters < 1:
            raise ValueError("clusters must be at least 1")
        if self.overlay_degree < 2:
            raise ValueError("overlay_degree must be at least 2")


@dataclass(frozen=True)
class RoutingPlan:
    kind: TopologyKind
    nodes: tuple[int, ...]
    root: int | None = None
    clusters: tuple[tuple[int, ...], ...] = ()
    aggregators: tuple[int, ...] = ()
    neighbours: tuple[tuple[int, tuple[int, ...]], ...] = ()

    def neighbours_of(self, node: int) -> tuple[int, ...]:
        return dict(self.neighbours).get(node, ())

    def upstream(self, node: int) -> int | None:
        if self.kind.variant == "centralized":
            return self.root
        if self.kind.variant == "hierarchical":
            for members, agg in zip(self.clusters, self.aggregators):
                if node in members:
                    return agg
        return None

    def schedule(self) -> list[tuple[int, int, str]]:
        """Ordered (src, dst, kind) coordination messages of one failure-free round."""
        v = self.kind.variant
        out: list[tuple[int, int, str]] = []
        if v == "centralized":
            out += [(x, self.root, "update_up") for x in self.nodes]
            out += [(self.root, x, "model_down") for x in self.nodes]
        elif v == "hierarchical":
            for members, agg in zip(self.clusters, self.aggregators):
                out += [(x, agg, "update_up") for x in members if x != agg]
            out += [(agg, self.root, "regional_up") for agg in self.aggregators]
            out += [(self.root, agg, "global_down") for agg in self.aggregators]
            for members, agg in zip(self.clusters, self.aggregators):
                out += [(agg, x, "model_down") for x in members if x != agg]
        else:
            for x, nbrs in self.neighbours:
                out += [(x, y, "gossip") for y in nbrs]
        return out

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        if self.kind.variant == "decentralized":
            g.add_edges_from((x, y) for x, ys in self.neighbours for y in ys)
        elif self.kind.variant == "centralized":
            g.add_edges_from((self.root, x) for x in self.nodes)
        else:
            for members, agg in zip(self.clusters, self.aggregators):
                g.add_edges_from((agg, x) for x in members if x != agg)
                g.add_edge(self.root, agg)
        return g


def balanced_clusters(nodes: Sequence[int], cluster_size: int, count: int | None = None) -> list[list[int]]:
    """Contiguous clusters whose sizes differ by at most one."""
    nodes = list(nodes)
    k = count if count is not None else max(1, math.ceil(len(nodes) / cluster_size))
    k = min(k, len(nodes))
    base, extra = divmod(len(nodes), k)
    out, i = [], 0
    for c in range(k):
        size = base + (1 if c < extra else 0)
        out.append(nodes[i:i + size])
        i += size
    return out


def build_overlay(nodes: Sequence[int], degree: int, seed: int) -> nx.Graph:
    """Seeded connected k-regular graph; the complete graph when k >= n - 1."""
    nodes = list(nodes)
    n = len(nodes)
    if degree >= n - 1:
        g = nx.complete_graph(n)
    else:
        if (n * degree) % 2:
            raise TopologyError(f"no {degree}-regular graph on {n} nodes (n*k must be even)")
        for attempt in range(OVERLAY_RETRIES):
            g = nx.random_regular_graph(degree, n, seed=seed + attempt)
            if nx.is_connected(g):
                break
        else:
            raise TopologyError(f"no connected overlay after {OVERLAY_RETRIES} tries")
    return nx.relabel_nodes(g, dict(enumerate(nodes)))


def build_topology(kind: TopologyKind, nodes: Sequence[int], seed: int = 0,
                   barred: frozenset[int] = frozenset()) -> RoutingPlan:
    nodes = tuple(sorted(nodes))
    if len(nodes) < 2:
        raise TopologyError("a topology needs at least two nodes")
    if kind.variant == "centralized":
        return RoutingPlan(kind, nodes, root=COORDINATOR)
    if kind.variant == "hierarchical":
        clusters = balanced_clusters(nodes, kind.cluster_size, kind.clusters)
        aggs = []
        for members in clusters:
            eligible = [x for x in members if x not in barred] or members
            aggs.append(eligible[0])
        return RoutingPlan(kind, nodes, COORDINATOR, tuple(map(tuple, clusters)), tuple(aggs))
    g = build_overlay(nodes, kind.overlay_degree, seed)
    nbrs = tuple((x, tuple(sorted(g.neighbors(x)))) for x in nodes)
    return RoutingPlan(kind, nodes, neighbours=nbrs)


def hierarchical_aggregate(cluster_updates: Sequence[Sequence[UpdateRecord]], aggregators: Sequence[int],
                           round_: int = 0, notes: list[str] | None = None) -> list[UpdateRecord]:
    """One pre-aggregated record per non-empty cluster. Each carries the summed
    sample count and exact partial sums, so a FedAvg over the regional records
    equals the flat FedAvg over all members."""
    out = []
    for members, agg in zip(cluster_updates, aggregators):
        if not members:
            if notes is not None:
                notes.append(f"cluster of aggregator {agg} empty; skipped")
            continue
        out.append(pre_aggregate(list(members), agg, round_))
    return out


# --- round routing ------------------------------------------------------------------------

@dataclass
class RoundInputs:
    round: int
    updates: dict[int, tuple[UpdateRecord, int]]   # node -> (update, ms until it is ready to send)
    engine: ConsensusEngine
    make_context: Callable[[list[UpdateRecord], list[int]], RoundContext]
    validators: list[int]
    window_ms: int = 180_000
    phase_ms: int = 2_000


@dataclass
class RoundResult:
    outcome: ConsensusOutcome
    counts: dict[str, int]
    on_time: tuple[int, ...]
    late: tuple[int, ...]
    received_model: frozenset[int]
    contributions: list[UpdateRecord]
    start_ms: int
    end_ms: int
    notes: list[str] = field(default_factory=list)

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms

    def coordination(self) -> int:
        return sum(self.counts.get(k, 0) for k in COORDINATION_KINDS)

    def global_layer(self) -> int:
        return sum(self.counts.get(k, 0) for k in GLOBAL_LAYER_KINDS)

    def total(self) -> int:
        return sum(self.counts.values())


def _update_size(u: UpdateRecord) -> int:
    return 8 * u.params.num_params + UPDATE_OVERHEAD_BYTES


class Router:
    """Carries per-collector state across rounds: updates that reach a collector
    after its window closed are held and join the next round's aggregation."""

    def __init__(self, sim: Simulator, net: Network) -> None:
        self.sim = sim
        self.net = net
        self.carry: dict[int, dict[int, UpdateRecord]] = {}
        self._window: tuple[int, int] = (0, -1)
        self._inbox: dict[int, dict[int, UpdateRecord]] = {}
        self._late: set[int] = set()

    def _on_update(self, msg: Message) -> None:
        u: UpdateRecord = msg.payload
        lo, hi = self._window
        if lo <= msg.deliver_time <= hi:
            box = self._inbox.setdefault(msg.dst, {})
        else:
            self._late.add(u.node)
            box = self.carry.setdefault(msg.dst, {})
        held = box.get(u.node)
        if held is None or held.round <= u.round:
            box[u.node] = u

    def _collect(self, plan: RoutingPlan, inp: RoundInputs, collectors: set[int]) -> None:
        t0 = self.sim.now
        self._window = (t0, t0 + inp.window_ms)
        self._inbox = {}
        self._late = set()
        for c in collectors:
            self.net.on(c, "update_up", self._on_update)
            self.net.on(c, "gossip", self._on_update)
        # late arrivals from earlier rounds join this round unless superseded
        for c, held in self.carry.items():
            if c in collectors:
                self._inbox.setdefault(c, {}).update(held)
        self.carry = {c: h for c, h in self.carry.items() if c not in collectors}
        for node, (u, ready) in sorted(inp.updates.items()):
            dsts = self._destinations(plan, node)
            kind = "gossip" if plan.kind.variant == "decentralized" else "update_up"

            def send(node=node, u=u, dsts=dsts, kind=kind) -> None:
                for d in dsts:
                    if d == node:
                        self._inbox.setdefault(d, {})[node] = u
                    else:
                        self.net.send(node, d, u, kind, _update_size(u))
            self.sim.schedule(send, ready, f"ready:{node}")
        self.sim.run_until(t0 + inp.window_ms)

    def _destinations(self, plan: RoutingPlan, node: int) -> list[int]:
        if plan.kind.variant == "decentralized":
            return [node, *plan.neighbours_of(node)]
        return [plan.upstream(node)]

    def route_round(self, plan: RoutingPlan, inp: RoundInputs) -> RoundResult:
        start = self.sim.now
        before = Counter(self.net.sent)
        notes: list[str] = []
        v = plan.kind.variant
        if v == "centralized":
            collectors = {plan.root}
        elif v == "hierarchical":
            collectors = set(plan.aggregators)
        else:
            collectors = set(plan.nodes)
        self._collect(plan, inp, collectors)
        inbox = {c: dict(self._inbox.get(c, {})) for c in collectors}
        on_time = sorted({n for box in inbox.values() for n in box})
        # this round's updates that reached no collector before the window closed
        missed = {n for n in inp.updates if n not in on_time}

        if v == "centralized":
            contributions = [inbox[plan.root][n] for n in sorted(inbox[plan.root])] \
                if self.net.alive(plan.root) else []
            if not self.net.alive(plan.root):
                notes.append("coordinator down")
        elif v == "hierarchical":
            contributions = self._regional_phase(plan, inp, inbox, notes)
        else:
            contributions = []
            for x in plan.nodes:
                if not self.net.alive(x) or x not in inbox[x]:
                    continue
                group = [inbox[x][n] for n in sorted(inbox[x])]
                contributions.append(pre_aggregate(group, x, inp.round))

        validators = [x for x in inp.validators if self.net.alive(x)]
        outcome = self._consensus(inp, contributions, validators)
        received: frozenset[int] = frozenset()
        if outcome.committed:
            received = self._distribute(plan, inp, outcome.model)
        # update handlers stay registered so stragglers are still caught and carried
        for kind in ("regional_up", "global_down", "model_down"):
            self.net.off(kind)
        counts = Counter(self.net.sent)
        counts.subtract(before)
        return RoundResult(outcome, {k: c for k, c in sorted(counts.items()) if c}, tuple(on_time),
                           tuple(sorted(self._late | missed)), received, contributions, start, self.sim.now, notes)

    def _regional_phase(self, plan: RoutingPlan, inp: RoundInputs, inbox: dict[int, dict[int, UpdateRecord]],
                        notes: list[str]) -> list[UpdateRecord]:
        got: dict[int, UpdateRecord] = {}

        def on_regional(msg: Message) -> None:
            got[msg.src] = msg.payload
        self.net.on(plan.root, "regional_up", on_regional)
        groups = []
        for agg in plan.aggregators:
            box = inbox.get(agg, {})
            groups.append([box[n] for n in sorted(box)] if self.net.alive(agg) else [])
            if not self.net.alive(agg):
                notes.append(f"regional aggregator {agg} down")
        regional = hierarchical_aggregate(groups, plan.aggregators, inp.round, notes)
        for r in regional:
            self.net.send(r.node, plan.root, r, "regional_up", _update_size(r))
        self.sim.run_until(self.sim.now + inp.phase_ms)
        if not self.net.alive(plan.root):
            notes.append("root down")
            return []
        return [got[a] for a in plan.aggregators if a in got]

    def _consensus(self, inp: RoundInputs, contributions: list[UpdateRecord], validators: list[int]) -> ConsensusOutcome:
        if not contributions:
            return ConsensusOutcome(False, reason="no contributions")
        if not validators:
            return ConsensusOutcome(False, reason="no live validators")
        ctx = inp.make_context(contributions, validators)
        box: list[ConsensusOutcome] = []
        inp.engine.start(ctx, box.append)
        deadline = inp.engine.deadline_ms(ctx)
        self.sim.run_while(lambda: not box, deadline)
        if not box:
            return ConsensusOutcome(False, reason="consensus deadline passed")
        return box[0]

    def _distribute(self, plan: RoutingPlan, inp: RoundInputs, model: ModelParams) -> frozenset[int]:
        received: set[int] = set()

        def on_model(msg: Message) -> None:
            received.add(msg.dst)
            if plan.kind.variant == "hierarchical" and msg.kind == "global_down":
                idx = plan.aggregators.index(msg.dst)
                for x in plan.clusters[idx]:
                    if x != msg.dst:
                        self.net.send(msg.dst, x, model, "model_down", 8 * model.num_params)
        v = plan.kind.variant
        size = 8 * model.num_params
        if v == "centralized":
            for x in plan.nodes:
                self.net.on(x, "model_down", on_model)
                self.net.send(plan.root, x, model, "model_down", size)
        elif v == "hierarchical":
            for x in plan.nodes:
                self.net.on(x, "model_down", on_model)
                self.net.on(x, "global_down", on_model)
            for agg in plan.aggregators:
                self.net.send(plan.root, agg, model, "global_down", size)
        else:
            # peers read the committed model from the ledger-anchored store
            return frozenset(x for x in plan.nodes if self.net.alive(x))
        self.sim.run_until(self.sim.now + inp.phase_ms)
        return frozenset(received)
