"""Threshold additively homomorphic encryption behind a backend switch.

``backend="mock"`` is a transparent linear scheme for fast protocol tests;
``backend="real"`` (alias ``"paillier"``) is threshold Paillier.
"""

from __future__ import annotations

from typing import Iterable

from . import mock, paillier
from .common import (
    Ciphertext,
    CryptoError,
    DecryptionShare,
    InsufficientSharesError,
    KeyMismatchError,
    MembershipProof,
    ParameterError,
    PlaintextRangeError,
    PublicKey,
    SecretShare,
    SecurityParams,
    Seed,
    SeedStream,
    ShareProof,
    ValueDomain,
    derive_common_randomness,
)

_KEYGEN = {"mock": mock.keygen, "real": paillier.keygen, "paillier": paillier.keygen}

BACKENDS = ("mock", "real")


def keygen(params: SecurityParams, t: int, m: int, seed: Seed, backend: str = "mock"):
    if backend not in _KEYGEN:
        raise ParameterError(f"unknown backend {backend!r}")
    if not 1 < t <= m:
        raise ParameterError(f"need 1 < t <= m, got t={t}, m={m}")
    return _KEYGEN[backend](params, t, m, seed)


def encrypt(pk: PublicKey, value: int, seed: Seed) -> Ciphertext:
    return pk.encrypt(value, seed)


def add(pk: PublicKey, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    pk.check(a, b)
    return pk.add(a, b)


def scale(pk: PublicKey, c: Ciphertext, factor: int) -> Ciphertext:
    pk.check(c)
    return pk.scale(c, factor)


def prove_membership(pk: PublicKey, value: int, seed: Seed, domain: ValueDomain):
    return pk.prove_membership(value, seed, domain)


def verify_membership(pk: PublicKey, c: Ciphertext, domain: ValueDomain, proof: MembershipProof) -> bool:
    if not isinstance(c, Ciphertext) or not isinstance(proof, MembershipProof):
        return False
    if c.backend != pk.backend or c.key_id != pk.key_id:
        return False
    return pk.verify_membership(c, domain, proof)


def forge_membership(pk: PublicKey, c: Ciphertext, domain: ValueDomain) -> MembershipProof:
    """Best-effort proof for an arbitrary ciphertext (adversary use in tests)."""
    if isinstance(pk, mock.MockPublicKey):
        return pk.forge_membership(c, domain)
    return MembershipProof(b"")


def share_decrypt(share: SecretShare, c: Ciphertext) -> DecryptionShare:
    share.public_key.check(c)
    return share.decrypt_share(c)


def verify_share(pk: PublicKey, c: Ciphertext, share: DecryptionShare) -> bool:
    if not isinstance(share, DecryptionShare) or not isinstance(share.proof, ShareProof):
        return False
    if not isinstance(c, Ciphertext) or c.backend != pk.backend or c.key_id != pk.key_id:
        return False
    return pk.verify_share(c, share)


def combine(pk: PublicKey, c: Ciphertext, shares: Iterable[DecryptionShare]) -> int:
    pk.check(c)
    return pk.combine(c, [s for s in shares if isinstance(s, DecryptionShare)])


__all__ = [
    "BACKENDS",
    "Ciphertext",
    "CryptoError",
    "DecryptionShare",
    "InsufficientSharesError",
    "KeyMismatchError",
    "MembershipProof",
    "ParameterError",
    "PlaintextRangeError",
    "PublicKey",
    "SecretShare",
    "SecurityParams",
    "SeedStream",
    "ShareProof",
    "ValueDomain",
    "add",
    "combine",
    "derive_common_randomness",
    "encrypt",
    "forge_membership",
    "keygen",
    "prove_membership",
    "scale",
    "share_decrypt",
    "verify_membership",
    "verify_share",
]
