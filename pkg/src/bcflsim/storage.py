"""Tiered storage: hash-chained ledger, Merkle model integrity, content-addressed
off-chain store with replicas, an LRU model cache, and the round audit trail."""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .crypto import sha256
from .learning import ModelParams

ON_CHAIN_CAP_BYTES = 1_000_000
DEFAULT_CHUNK_BYTES = 4096
ZERO_HASH = bytes(32)


class StorageError(Exception):
    pass


class RecordTooLarge(StorageError):
    pass


class Unavailable(StorageError):
    pass


class CorruptionError(StorageError):
    pass


class AuditError(StorageError):
    pass


# --- canonical serialisation and chunking ----------------------------------

def serialize_params(params: ModelParams) -> bytes:
    """Layer order, weight then bias, row-major, big-endian float64."""
    return b"".join(np.ascontiguousarray(a).astype(">f8").tobytes()
                    for w, b in params.layers for a in (w, b))


def deserialize_params(data: bytes, shapes) -> ModelParams:
    vec = np.frombuffer(data, dtype=">f8").astype(np.float64)
    return ModelParams.from_flat(vec, shapes)


@dataclass(frozen=True)
class Chunks:
    chunks: tuple[bytes, ...]
    length: int  # true byte length before zero padding

    def reassemble(self) -> bytes:
        return b"".join(self.chunks)[: self.length]


def chunk_bytes_of(data: bytes, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> Chunks:
    if chunk_bytes < 64:
        raise ValueError("chunk_bytes must be at least 64")
    n = max(1, math.ceil(len(data) / chunk_bytes))
    padded = data + bytes(n * chunk_bytes - len(data))
    return Chunks(tuple(padded[i * chunk_bytes:(i + 1) * chunk_bytes] for i in range(n)), len(data))


def chunk_model(params: ModelParams, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> Chunks:
    return chunk_bytes_of(serialize_params(params), chunk_bytes)


def reassemble_model(chunks: Chunks, shapes) -> ModelParams:
    return deserialize_params(chunks.reassemble(), shapes)


# --- Merkle tree --------------------------------------------------------------

def leaf_hash(chunk: bytes) -> bytes:
    return sha256(b"\x00", chunk)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(b"\x01", left, right)


@dataclass
class MerkleTree:
    """Binary hash tree; an unpaired last node is promoted to the next level unchanged."""

    chunks: tuple[bytes, ...]
    levels: list[list[bytes]] = field(init=False)

    def __post_init__(self) -> None:
        if not self.chunks:
            raise StorageError("a Merkle tree needs at least one chunk")
        level = [leaf_hash(c) for c in self.chunks]
        self.levels = [level]
        while len(level) > 1:
            nxt = [node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
            if len(level) % 2:
                nxt.append(level[-1])
            self.levels.append(nxt)
            level = nxt

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def height(self) -> int:
        return len(self.levels) - 1

    def proof(self, index: int) -> list[bytes | None]:
        """Sibling hashes from leaf to root; None marks a level where the node was promoted."""
        if not 0 <= index < len(self.chunks):
            raise IndexError(f"chunk index {index} out of range")
        path: list[bytes | None] = []
        for level in self.levels[:-1]:
            sib = index ^ 1
            path.append(level[sib] if sib < len(level) else None)
            index //= 2
        return path


def merkle_root(chunks) -> bytes:
    return MerkleTree(tuple(chunks)).root


def merkle_proof(tree: MerkleTree, index: int) -> list[bytes | None]:
    return tree.proof(index)


def verify_proof(root: bytes, chunk: bytes, index: int, path: list[bytes | None]) -> bool:
    if index < 0:
        return False
    h = leaf_hash(chunk)
    for sib in path:
        if sib is not None:
            h = node_hash(sib, h) if index & 1 else node_hash(h, sib)
        index //= 2
    return index == 0 and h == root


def model_root(params: ModelParams, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> bytes:
    return merkle_root(chunk_model(params, chunk_bytes).chunks)


# --- content-addressed store --------------------------------------------------

class ContentStore:
    """In-process DHT stand-in: content lives on `replicas` independent copies,
    any of which can be failed or corrupted to exercise availability paths."""

    def __init__(self, replicas: int = 3, failure_probability: float = 0.0, seed: int = 0) -> None:
        if replicas < 1:
            raise ValueError("need at least one replica")
        self.replicas: list[dict[bytes, bytes]] = [{} for _ in range(replicas)]
        self.failed: set[int] = set()
        self.failure_probability = failure_probability
        self._rng = np.random.default_rng(seed)
        self.gets = 0
        self.puts = 0

    def put(self, content: bytes) -> bytes:
        address = sha256(content)
        for r in self.replicas:
            r[address] = content
        self.puts += 1
        return address

    def fail_replica(self, i: int) -> None:
        self.failed.add(i)

    def restore_replica(self, i: int) -> None:
        self.failed.discard(i)

    def get(self, address: bytes) -> bytes:
        self.gets += 1
        corrupted = False
        for i, r in enumerate(self.replicas):
            if i in self.failed:
                continue
            if self.failure_probability and self._rng.random() < self.failure_probability:
                continue
            data = r.get(address)
            if data is None:
                continue
            if sha256(data) != address:
                corrupted = True
                continue
            return data
        if corrupted:
            raise CorruptionError(f"every reachable copy of {address.hex()[:16]} fails its hash check")
        raise Unavailable(f"content {address.hex()[:16]} unavailable")

    def __contains__(self, address: bytes) -> bool:
        return any(address in r for r in self.replicas)


def dht_put(store: ContentStore, content: bytes) -> bytes:
    return store.put(content)


def dht_get(store: ContentStore, address: bytes) -> bytes:
    return store.get(address)


# --- on-chain ledger ------------------------------------------------------------

@dataclass
class OnChainRecord:
    round: int
    model_root: bytes
    participants: tuple[int, ...]
    metrics: dict
    timestamp_ms: int

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metrics, sort_keys=True, separators=(",", ":")).encode()
        return b"".join([
            struct.pack(">qq", self.round, self.timestamp_ms),
            self.model_root,
            struct.pack(">I", len(self.participants)),
            b"".join(struct.pack(">q", p) for p in self.participants),
            struct.pack(">I", len(meta)),
            meta,
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> OnChainRecord:
        rnd, ts = struct.unpack_from(">qq", data, 0)
        root = data[16:48]
        (n,) = struct.unpack_from(">I", data, 48)
        parts = struct.unpack_from(f">{n}q", data, 52)
        pos = 52 + 8 * n
        (m,) = struct.unpack_from(">I", data, pos)
        meta = json.loads(data[pos + 4:pos + 4 + m])
        return cls(rnd, root, tuple(parts), meta, ts)

    @property
    def size(self) -> int:
        return len(self.to_bytes())


@dataclass
class Block:
    height: int
    prev_hash: bytes
    payload: bytes
    block_hash: bytes

    @staticmethod
    def compute_hash(height: int, prev_hash: bytes, payload: bytes) -> bytes:
        return sha256(struct.pack(">q", height), prev_hash, payload)

    def record(self) -> OnChainRecord:
        return OnChainRecord.from_bytes(self.payload)

    def to_bytes(self) -> bytes:
        return struct.pack(">q", self.height) + self.prev_hash + self.block_hash + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> Block:
        (height,) = struct.unpack_from(">q", data, 0)
        return cls(height, data[8:40], data[72:], data[40:72])


class Ledger:
    """Append-only hash chain starting from a genesis block at height 0."""

    def __init__(self, cap_bytes: int = ON_CHAIN_CAP_BYTES) -> None:
        self.cap_bytes = cap_bytes
        genesis = OnChainRecord(0, ZERO_HASH, (), {"genesis": True}, 0).to_bytes()
        self.blocks: list[Block] = [Block(0, ZERO_HASH, genesis, Block.compute_hash(0, ZERO_HASH, genesis))]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def __len__(self) -> int:
        return len(self.blocks)

    def append_block(self, record: OnChainRecord) -> Block:
        return append_block(self, record)

    def verify(self) -> bool:
        return verify_chain(self.blocks)

    def dump(self) -> str:
        """Hex-encoded, length-prefixed blocks, one per line."""
        lines = []
        for b in self.blocks:
            raw = b.to_bytes()
            lines.append((struct.pack(">I", len(raw)) + raw).hex())
        return "\n".join(lines) + "\n"


def append_block(ledger: Ledger, record: OnChainRecord) -> Block:
    payload = record.to_bytes()
    if len(payload) >= ledger.cap_bytes:
        raise RecordTooLarge(f"on-chain record of {len(payload)} bytes reaches the {ledger.cap_bytes}-byte cap")
    tip = ledger.tip
    height = tip.height + 1
    block = Block(height, tip.block_hash, payload, Block.compute_hash(height, tip.block_hash, payload))
    ledger.blocks.append(block)
    return block


def verify_chain(blocks) -> bool:
    prev = None
    for i, b in enumerate(blocks):
        if b.height != i:
            return False
        expected_prev = ZERO_HASH if prev is None else prev.block_hash
        if b.prev_hash != expected_prev:
            return False
        if Block.compute_hash(b.height, b.prev_hash, b.payload) != b.block_hash:
            return False
        prev = b
    return bool(blocks)


def load_chain_dump(text: str) -> list[Block]:
    blocks = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        raw = bytes.fromhex(line)
        (n,) = struct.unpack_from(">I", raw, 0)
        if n != len(raw) - 4:
            raise StorageError("length prefix does not match block size")
        blocks.append(Block.from_bytes(raw[4:]))
    return blocks


# --- cache -----------------------------------------------------------------------

class ModelCache:
    """Bounded LRU of global models keyed by Merkle root."""

    def __init__(self, capacity: int = 4) -> None:
        self.capacity = capacity
        self._entries: OrderedDict[bytes, tuple[int, ModelParams]] = OrderedDict()
        self.lookups = 0
        self.misses = 0

    def put(self, root: bytes, params: ModelParams, round_: int = 0) -> None:
        self._entries[root] = (round_, params)
        self._entries.move_to_end(root)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def get(self, root: bytes) -> ModelParams | None:
        self.lookups += 1
        hit = self._entries.get(root)
        if hit is None:
            self.misses += 1
            return None
        self._entries.move_to_end(root)
        return hit[1]

    def on_commit(self, round_: int) -> None:
        """A committed round supersedes every global model from earlier rounds."""
        for root in [r for r, (rnd, _) in self._entries.items() if rnd < round_]:
            del self._entries[root]

    def __contains__(self, root: bytes) -> bool:
        return root in self._entries

    @property
    def hit_rate(self) -> float:
        return (self.lookups - self.misses) / self.lookups if self.lookups else 0.0


def cache_put(cache: ModelCache, root: bytes, params: ModelParams, round_: int = 0) -> None:
    cache.put(root, params, round_)


def cache_get(cache: ModelCache, root: bytes) -> ModelParams | None:
    return cache.get(root)


class TieredStore:
    """Cache in front of the content store; models are stored as chunk lists so
    any chunk can be checked against the on-chain root on its own."""

    def __init__(self, dht: ContentStore, cache: ModelCache, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> None:
        self.dht = dht
        self.cache = cache
        self.chunk_bytes = chunk_bytes
        self.manifests: dict[bytes, bytes] = {}  # model root -> manifest address

    def store_model(self, params: ModelParams, round_: int | None = None) -> tuple[bytes, bytes]:
        chunks = chunk_model(params, self.chunk_bytes)
        addresses = [self.dht.put(c) for c in chunks.chunks]
        manifest = json.dumps({"length": chunks.length, "chunks": [a.hex() for a in addresses],
                               "shapes": [[list(w), list(b)] for w, b in params.shapes]}).encode()
        maddr = self.dht.put(manifest)
        root = merkle_root(chunks.chunks)
        self.manifests[root] = maddr
        if round_ is not None:
            self.cache.put(root, params, round_)
        return root, maddr

    def load_model(self, root: bytes) -> ModelParams:
        cached = self.cache.get(root)
        if cached is not None:
            return cached
        maddr = self.manifests.get(root)
        if maddr is None:
            raise Unavailable(f"no manifest for model {root.hex()[:16]}")
        manifest = json.loads(self.dht.get(maddr))
        chunks = Chunks(tuple(self.dht.get(bytes.fromhex(a)) for a in manifest["chunks"]), manifest["length"])
        if merkle_root(chunks.chunks) != root:
            raise CorruptionError("reassembled model does not match its Merkle root")
        shapes = tuple((tuple(w), tuple(b)) for w, b in manifest["shapes"])
        return reassemble_model(chunks, shapes)


# --- audit trail -----------------------------------------------------------------

@dataclass(frozen=True)
class RoundAuditRecord:
    round: int
    participants: tuple[tuple[int, str], ...]  # (node, key fingerprint)
    model_root: bytes
    validation_score: float
    timestamp_ms: int

    def to_json(self) -> str:
        return json.dumps({
            "round": self.round,
            "participants": [{"node": n, "key_fingerprint": fp} for n, fp in self.participants],
            "model_root": self.model_root.hex(),
            "validation_score": self.validation_score,
            "timestamp_ms": self.timestamp_ms,
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> RoundAuditRecord:
        d = json.loads(line)
        return cls(d["round"], tuple((p["node"], p["key_fingerprint"]) for p in d["participants"]),
                   bytes.fromhex(d["model_root"]), d["validation_score"], d["timestamp_ms"])

    def digest(self) -> bytes:
        return sha256(self.to_json().encode())


class AuditLog:
    def __init__(self) -> None:
        self._records: list[RoundAuditRecord] = []

    def append(self, record: RoundAuditRecord) -> None:
        if self._records and record.round <= self._records[-1].round:
            raise AuditError(f"audit round {record.round} does not follow {self._records[-1].round}")
        self._records.append(record)

    @property
    def records(self) -> tuple[RoundAuditRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self._records)


def verify_audit(records, blocks) -> bool:
    """Audit records and anchored rounds must correspond one to one, with equal
    model roots and the record digest anchored on-chain."""
    anchored = {}
    for b in blocks[1:]:
        rec = b.record()
        anchored[rec.round] = rec
    if sorted(anchored) != [r.round for r in records]:
        return False
    for r in records:
        rec = anchored[r.round]
        if rec.model_root != r.model_root or rec.metrics.get("audit_digest") != r.digest().hex():
            return False
    return True
