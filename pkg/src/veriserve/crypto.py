"""Digests, canonical byte encodings, and deterministic signatures.

Every protocol object that gets hashed or signed is first flattened to a
canonical byte string: fixed field order, fixed-width little-endian integers,
length-prefixed variable parts.  Digests are SHA-256.  Signatures are Ed25519
(deterministic by construction), with keys derived from seed bytes so whole
simulations replay identically; the byte layout is fixed so real keys could be
swapped in without touching any calling code.
"""
from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


def encode_u32(value: int) -> bytes:
    if not 0 <= value <= _U32_MAX:
        raise ValueError(f"u32 out of range: {value}")
    return value.to_bytes(4, "little")


def encode_u64(value: int) -> bytes:
    if not 0 <= value <= _U64_MAX:
        raise ValueError(f"u64 out of range: {value}")
    return value.to_bytes(8, "little")


def encode_bytes(data: bytes) -> bytes:
    """Length-prefixed raw bytes."""
    return encode_u32(len(data)) + data


def encode_str(text: str) -> bytes:
    return encode_bytes(text.encode("utf-8"))


class SigningKey:
    """Deterministic Ed25519 signer derived from 32 seed bytes."""

    def __init__(self, seed: bytes):
        if len(seed) != 32:
            raise ValueError("seed must be exactly 32 bytes")
        self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self._public = self._key.public_key().public_bytes_raw()

    @classmethod
    def from_identity(cls, identity: str, namespace: bytes = b"veriserve-key") -> "SigningKey":
        """Derive a keypair from a human-readable identity string."""
        return cls(digest(namespace + b"|" + identity.encode("utf-8")))

    @property
    def public_bytes(self) -> bytes:
        return self._public

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature by ``public_key``."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True
