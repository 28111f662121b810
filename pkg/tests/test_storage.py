from __future__ import annotations

import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcflsim.learning import init_params
from bcflsim.storage import (ON_CHAIN_CAP_BYTES, ZERO_HASH, AuditLog, AuditError, Block, ContentStore, CorruptionError,
                             Ledger, MerkleTree, ModelCache, OnChainRecord, RecordTooLarge, RoundAuditRecord,
                             StorageError, TieredStore, Unavailable, chunk_bytes_of, chunk_model, dht_get, dht_put,
                             load_chain_dump, merkle_proof, merkle_root, model_root, reassemble_model, verify_audit,
                             verify_chain, verify_proof)


def test_chunk_counts_and_padding():
    c = chunk_bytes_of(bytes(100), 64)
    assert len(c.chunks) == 2 and c.length == 100 and len(c.chunks[1]) == 64
    exact = chunk_bytes_of(bytes(range(128)), 64)
    assert len(exact.chunks) == 2 and b"".join(exact.chunks) == bytes(range(128))


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 40), seed=st.integers(0, 1000), chunk=st.sampled_from([64, 100, 4096]))
def test_chunk_round_trip_is_bit_exact(h, seed, chunk):
    p = init_params([7, h, 3], seed)
    assert reassemble_model(chunk_model(p, chunk), p.shapes).same_as(p)


def test_single_chunk_root():
    assert merkle_root([b"abc"]) == hashlib.sha256(b"\x00abc").digest()


def test_four_chunk_root_by_hand():
    chunks = [bytes([i]) * 10 for i in range(4)]
    h = [hashlib.sha256(b"\x00" + c).digest() for c in chunks]
    h01 = hashlib.sha256(b"\x01" + h[0] + h[1]).digest()
    h23 = hashlib.sha256(b"\x01" + h[2] + h[3]).digest()
    assert merkle_root(chunks) == hashlib.sha256(b"\x01" + h01 + h23).digest()


def test_odd_node_is_promoted():
    chunks = [b"a", b"b", b"c"]
    h = [hashlib.sha256(b"\x00" + c).digest() for c in chunks]
    h01 = hashlib.sha256(b"\x01" + h[0] + h[1]).digest()
    assert merkle_root(chunks) == hashlib.sha256(b"\x01" + h01 + h[2]).digest()


def test_empty_tree_and_bad_index():
    with pytest.raises(StorageError):
        MerkleTree(())
    tree = MerkleTree((b"a", b"b"))
    with pytest.raises(IndexError):
        merkle_proof(tree, 2)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 17), data=st.data())
def test_all_proofs_verify_and_tampering_fails(n, data):
    chunks = [bytes([i % 256]) * 8 + bytes([n]) for i in range(n)]
    tree = MerkleTree(tuple(chunks))
    for i, c in enumerate(chunks):
        assert verify_proof(tree.root, c, i, tree.proof(i))
    i = data.draw(st.integers(0, n - 1))
    bit = data.draw(st.integers(0, 8 * len(chunks[i]) - 1))
    bad = bytearray(chunks[i])
    bad[bit // 8] ^= 1 << (bit % 8)
    assert not verify_proof(tree.root, bytes(bad), i, tree.proof(i))
    if n > 1:
        assert not verify_proof(tree.root, chunks[i], (i + 1) % n, tree.proof(i)) or chunks[i] == chunks[(i + 1) % n]


def test_dht_round_trip_and_failures():
    store = ContentStore(replicas=3)
    addr = dht_put(store, b"payload")
    assert dht_get(store, addr) == b"payload"
    with pytest.raises(Unavailable):
        dht_get(store, b"\x00" * 32)
    store.fail_replica(0)
    store.fail_replica(1)
    assert dht_get(store, addr) == b"payload"
    store.fail_replica(2)
    with pytest.raises(Unavailable):
        dht_get(store, addr)


def test_dht_detects_corruption():
    store = ContentStore(replicas=2)
    addr = store.put(b"payload")
    store.replicas[0][addr] = b"paylOad"
    assert store.get(addr) == b"payload"
    store.replicas[1][addr] = b"paylOad"
    with pytest.raises(CorruptionError):
        store.get(addr)


def record(r, size_pad=0, root=None):
    return OnChainRecord(r, root or bytes([r % 256]) * 32, (0, 1), {"pad": "x" * size_pad}, 1000 * r)


def test_record_round_trip():
    rec = OnChainRecord(3, bytes(range(32)), (4, 5, 6), {"a": 1, "b": [1, 2]}, 77)
    assert OnChainRecord.from_bytes(rec.to_bytes()) == rec


def test_cap_boundary():
    ledger = Ledger()
    base = record(1).size
    with pytest.raises(RecordTooLarge):
        ledger.append_block(record(1, ON_CHAIN_CAP_BYTES - base))
    ledger.append_block(record(1, ON_CHAIN_CAP_BYTES - base - 1))
    assert ledger.verify()


def test_genesis_plus_one_verifies_and_mutation_breaks_it():
    ledger = Ledger()
    ledger.append_block(record(1))
    assert ledger.verify()
    b = ledger.blocks[1]
    ledger.blocks[1] = Block(b.height, b.prev_hash, b.payload[:-2] + b"y}", b.block_hash)
    assert not ledger.verify()


def test_empty_chain_does_not_verify():
    assert not verify_chain([])


def test_mutation_sweep_on_100_blocks():
    ledger = Ledger()
    for r in range(1, 101):
        ledger.append_block(record(r))
    assert ledger.verify()
    rng = np.random.default_rng(0)
    for _ in range(60):
        h = int(rng.integers(0, len(ledger)))
        field = ["height", "prev_hash", "payload", "block_hash"][int(rng.integers(0, 4))]
        blocks = list(ledger.blocks)
        b = blocks[h]
        if field == "height":
            blocks[h] = Block(b.height + 1, b.prev_hash, b.payload, b.block_hash)
        else:
            raw = bytearray(getattr(b, field))
            raw[int(rng.integers(0, len(raw)))] ^= 1 << int(rng.integers(0, 8))
            blocks[h] = Block(**{**b.__dict__, field: bytes(raw)})
        assert not verify_chain(blocks), (h, field)


def test_chain_dump_round_trip():
    ledger = Ledger()
    for r in range(1, 4):
        ledger.append_block(record(r))
    blocks = load_chain_dump(ledger.dump())
    assert [b.block_hash for b in blocks] == [b.block_hash for b in ledger.blocks]
    assert verify_chain(blocks)
    line = ledger.dump().splitlines()[1]
    raw = bytearray(bytes.fromhex(line))
    struct.pack_into(">I", raw, 0, 5)
    with pytest.raises(StorageError):
        load_chain_dump(bytes(raw).hex())


def test_cache_rules_and_hit_rate_trace():
    cache = ModelCache(capacity=2)
    p = init_params([2, 2], 0)
    a, b, c = b"a" * 32, b"b" * 32, b"c" * 32
    cache.put(a, p, 1)
    assert cache.get(a) is p
    cache.put(b, p, 2)
    cache.on_commit(2)
    assert a not in cache and b in cache
    trace = [a, b, c, b, b, a]
    misses = 0
    cache.lookups = cache.misses = 0
    for key in trace:
        hit = cache.get(key)
        misses += hit is None
    assert cache.hit_rate == (len(trace) - misses) / len(trace) == 0.5
    cache.put(a, p, 3)
    cache.put(c, p, 3)
    assert b not in cache  # least recently used entry evicted


def test_tiered_store_anchoring():
    dht = ContentStore(replicas=3)
    store = TieredStore(dht, ModelCache(2), chunk_bytes=256)
    p = init_params([10, 6, 3], 4)
    root, _ = store.store_model(p)
    assert root == model_root(p, 256)
    assert store.load_model(root).same_as(p)
    dht.fail_replica(0)
    dht.fail_replica(1)
    assert store.load_model(root).same_as(p)


def test_audit_log_and_anchoring():
    log = AuditLog()
    ledger = Ledger()
    for r in (1, 2, 4):
        a = RoundAuditRecord(r, ((0, "fp0"), (1, "fp1")), bytes([r]) * 32, 0.5 + r / 10, r * 100)
        log.append(a)
        ledger.append_block(OnChainRecord(r, a.model_root, (0, 1), {"audit_digest": a.digest().hex()}, r * 100))
    assert verify_audit(log.records, ledger.blocks)
    with pytest.raises(AuditError):
        log.append(RoundAuditRecord(4, (), ZERO_HASH, 0.0, 0))
    parsed = [RoundAuditRecord.from_json(line) for line in log.to_jsonl().splitlines()]
    assert parsed == list(log.records)
    tampered = list(log.records)
    tampered[1] = RoundAuditRecord(2, ((0, "fp0"),), tampered[1].model_root, tampered[1].validation_score, 200)
    assert not verify_audit(tampered, ledger.blocks)
    assert not verify_audit(list(log.records)[:2], ledger.blocks)
