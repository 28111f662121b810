"""Round context handed to a consensus engine and the outcome it reports back."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

from ..crypto import KeyRing
from ..learning import DatasetPartition, ModelParams, UpdateRecord
from ..simnet import Network, Simulator
from ..storage import ZERO_HASH, ContentStore
from ..trust import AdversarySpec


@dataclass
class RoundContext:
    sim: Simulator
    net: Network
    round: int
    contributions: list[UpdateRecord]
    validators: list[int]
    keys: KeyRing
    reference: ModelParams
    val_set: DatasetPartition
    byzantine: frozenset[int] = frozenset()
    barred: frozenset[int] = frozenset()
    adversary: AdversarySpec | None = None
    dht: ContentStore | None = None
    prev_hash: bytes = ZERO_HASH
    seed: int = 0
    # per-validator contribution sets; validators not listed see `contributions`
    views: dict[int, list[UpdateRecord]] = field(default_factory=dict)

    def view_of(self, node: int) -> list[UpdateRecord]:
        return self.views.get(node, self.contributions)

    def honest(self, node: int) -> bool:
        return node not in self.byzantine


@dataclass
class ConsensusOutcome:
    committed: bool
    model: ModelParams | None = None
    root: bytes | None = None
    leader: int | None = None
    included: tuple[int, ...] = ()
    excluded: tuple[int, ...] = ()
    suspects: tuple[int, ...] = ()
    rewards: dict[int, int] = field(default_factory=dict)
    reason: str = ""
    view: int = 0
    details: dict = field(default_factory=dict)


Done = Callable[[ConsensusOutcome], None]


class ConsensusEngine(Protocol):
    name: str

    def start(self, ctx: RoundContext, on_done: Done) -> None: ...

    def deadline_ms(self, ctx: RoundContext) -> int: ...
