"""Admission under the three trust models, reputation tracking, and scripted
Byzantine behaviours that corrupt updates."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, NamedTuple

import numpy as np

from .crypto import KeyRing, sha256
from .learning import ModelParams, UpdateRecord, add_dp_noise
from .storage import model_root

ROLES = ("data-provider", "trainer", "aggregator", "validator")

REPUTATION_BETA = 0.2
BAR_THRESHOLD = 0.3


# --- update signatures ------------------------------------------------------

def update_digest(u: UpdateRecord) -> bytes:
    return sha256(
        struct.pack(">qqq", u.node, u.round, u.sample_count),
        struct.pack(">ddd", u.train_loss, u.claimed_accuracy, u.val_loss),
        model_root(u.params),
    )


def sign_update(u: UpdateRecord, keys: KeyRing, signer: int | None = None) -> UpdateRecord:
    signer = u.node if signer is None else signer
    return replace(u, signature=keys.sign(signer, update_digest(u)))


def verify_update(u: UpdateRecord, keys: KeyRing) -> bool:
    return keys.verify(u.node, update_digest(u), u.signature)


# --- admission ------------------------------------------------------------------

@dataclass(frozen=True)
class AdmissionPolicy:
    model: Literal["permissionless", "consortium", "permissioned"] = "permissionless"
    stake_minimum: float = 1.0
    approvers: frozenset[int] = frozenset()
    approvers_required: int = 2
    role_table: frozenset[str] = frozenset(ROLES)

    def __post_init__(self) -> None:
        if self.model == "consortium" and self.approvers_required < 2:
            raise ValueError("consortium onboarding needs at least two approvers")
        if self.model == "permissioned" and not self.role_table:
            raise ValueError("permissioned policy needs a non-empty role table")
        if self.model not in ("permissionless", "consortium", "permissioned"):
            raise ValueError(f"unknown trust model {self.model!r}")


@dataclass(frozen=True)
class Credentials:
    node: int
    stake: float = 0.0
    approvals: tuple[tuple[int, bytes], ...] = ()  # (approver, signature over the candidate id)
    certificate: str | None = None                # opaque role token


class Verdict(NamedTuple):
    accepted: bool
    reason: str = ""


def approval_message(candidate: int) -> bytes:
    return b"approve:" + struct.pack(">q", candidate)


def approve(keys: KeyRing, approver: int, candidate: int) -> tuple[int, bytes]:
    return approver, keys.sign(approver, approval_message(candidate))


def admit(candidate: Credentials, policy: AdmissionPolicy, keys: KeyRing) -> Verdict:
    if policy.model == "permissionless":
        stake = candidate.stake
        if not isinstance(stake, (int, float)) or stake != stake:
            return Verdict(False, "malformed stake")
        if stake < policy.stake_minimum:
            return Verdict(False, f"stake {stake} below minimum {policy.stake_minimum}")
        return Verdict(True)
    if policy.model == "consortium":
        signers = set()
        for item in candidate.approvals:
            if not (isinstance(item, tuple) and len(item) == 2 and isinstance(item[1], bytes)):
                return Verdict(False, "malformed approval")
            approver, sig = item
            if approver in policy.approvers and approver != candidate.node \
                    and keys.verify(approver, approval_message(candidate.node), sig):
                signers.add(approver)
        if len(signers) < policy.approvers_required:
            return Verdict(False, f"{len(signers)} valid approvals, {policy.approvers_required} required")
        return Verdict(True)
    cert = candidate.certificate
    if not isinstance(cert, str) or not cert:
        return Verdict(False, "missing or malformed certificate")
    if cert not in policy.role_table:
        return Verdict(False, f"role {cert!r} not in role table")
    return Verdict(True)


# --- adversaries --------------------------------------------------------------------

Behavior = Literal["sign-flip", "scale", "gaussian-noise", "accuracy-spoof", "none"]


@dataclass(frozen=True)
class AdversarySpec:
    byzantine_fraction: float = 0.0
    behavior: Behavior = "sign-flip"
    factor: float = 20.0   # scale
    sigma: float = 1.0     # gaussian-noise
    delta: float = 0.3     # accuracy-spoof
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.byzantine_fraction <= 1.0:
            raise ValueError("byzantine_fraction must lie in [0, 1]")
        if self.factor <= 0:
            raise ValueError("scale factor must be positive")
        if self.behavior not in ("sign-flip", "scale", "gaussian-noise", "accuracy-spoof", "none"):
            raise ValueError(f"unknown behaviour {self.behavior!r}")


def select_byzantine(nodes: Iterable[int], spec: AdversarySpec) -> frozenset[int]:
    """Exactly floor(fraction * n) nodes, chosen by a seeded permutation."""
    nodes = sorted(nodes)
    k = int(spec.byzantine_fraction * len(nodes) + 1e-9)
    rng = np.random.default_rng(spec.seed)
    return frozenset(int(nodes[i]) for i in rng.permutation(len(nodes))[:k])


def _scale(params: ModelParams, c: float) -> ModelParams:
    return ModelParams(tuple((w * c, b * c) for w, b in params.layers))


def apply_adversary(update: UpdateRecord, spec: AdversarySpec, keys: KeyRing, seed: int = 0) -> UpdateRecord:
    """Corrupt one update. Claims made before the attack are left as they were,
    except for accuracy-spoof which inflates them. The result is signed with the
    adversary's own key."""
    b = spec.behavior
    out = update
    if b == "sign-flip":
        out = replace(update, params=_scale(update.params, -1.0), partials=None)
    elif b == "scale":
        out = replace(update, params=_scale(update.params, spec.factor), partials=None)
    elif b == "gaussian-noise":
        out = replace(update, params=add_dp_noise(update.params, spec.sigma, seed), partials=None)
    elif b == "accuracy-spoof":
        out = replace(update, claimed_accuracy=min(1.0, update.claimed_accuracy + spec.delta),
                      val_loss=max(0.0, update.val_loss - spec.delta))
    return sign_update(out, keys, signer=update.node)


# --- reputation -------------------------------------------------------------------------

Outcome = Literal["honest-contribution", "flagged-by-detector", "excluded-by-vote"]


@dataclass(frozen=True)
class ReputationScore:
    node: int
    score: float = 1.0
    history: int = 0

    @property
    def barred(self) -> bool:
        return self.score < BAR_THRESHOLD


def update_reputation(score: ReputationScore, outcome: Outcome, beta: float = REPUTATION_BETA) -> ReputationScore:
    if outcome not in ("honest-contribution", "flagged-by-detector", "excluded-by-vote"):
        raise ValueError(f"unknown outcome {outcome!r}")
    target = 1.0 if outcome == "honest-contribution" else 0.0
    new = (1.0 - beta) * score.score + beta * target
    return ReputationScore(score.node, min(1.0, max(0.0, new)), score.history + 1)


@dataclass
class ReputationTable:
    scores: dict[int, ReputationScore] = field(default_factory=dict)

    def get(self, node: int) -> ReputationScore:
        return self.scores.setdefault(node, ReputationScore(node))

    def record(self, node: int, outcome: Outcome) -> ReputationScore:
        self.scores[node] = update_reputation(self.get(node), outcome)
        return self.scores[node]

    def barred(self) -> frozenset[int]:
        return frozenset(n for n, s in self.scores.items() if s.barred)

    def snapshot(self) -> dict[str, float]:
        return {str(n): round(s.score, 6) for n, s in sorted(self.scores.items())}
