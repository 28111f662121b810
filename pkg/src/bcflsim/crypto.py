"""Hashing and simulated signatures.

Signatures are HMAC-SHA256 tags under per-node secrets held in a KeyRing.
Verification goes through the same ring, which stands in for a PKI: a node
can only produce valid tags for its own id.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field

DIGEST_SIZE = 32
SIG_SIZE = 32


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


class SigningError(Exception):
    pass


@dataclass
class KeyRing:
    """Per-node HMAC secrets derived deterministically from a seed."""

    seed: int = 0
    _keys: dict[int, bytes] = field(default_factory=dict)

    def key_for(self, node: int) -> bytes:
        if node not in self._keys:
            self._keys[node] = sha256(b"bcflsim-key", self.seed.to_bytes(8, "big", signed=True),
                                      node.to_bytes(8, "big", signed=True))
        return self._keys[node]

    def fingerprint(self, node: int) -> str:
        return sha256(b"fp", self.key_for(node)).hex()[:16]

    def sign(self, node: int, message: bytes) -> bytes:
        return sign(self.key_for(node), message)

    def verify(self, node: int, message: bytes, signature: bytes) -> bool:
        if len(signature) != SIG_SIZE:
            return False
        return hmac.compare_digest(sign(self.key_for(node), message), signature)


def sign(key: bytes, message: bytes) -> bytes:
    if not isinstance(key, (bytes, bytearray)) or len(key) == 0:
        raise SigningError("invalid signing key")
    return hmac.new(bytes(key), message, hashlib.sha256).digest()
