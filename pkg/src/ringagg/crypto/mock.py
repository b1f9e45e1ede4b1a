"""Transparent mock backend.

A ciphertext is ``(r, x + s*r) mod 2**bits`` for a secret scalar ``s`` kept
sealed inside the public key object. Addition and scaling act component-wise,
so the scheme is additively homomorphic and deterministic given the seed.
Proofs are hash bindings; their soundness is enforced by reading the sealed
plaintext inside the verify entry points, which is the only place it is read.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .common import (
    Ciphertext,
    DecryptionShare,
    InsufficientSharesError,
    MembershipProof,
    PlaintextRangeError,
    PublicKey,
    SecretShare,
    SecurityParams,
    Seed,
    SeedStream,
    ShareProof,
    ValueDomain,
    decode_ints,
    encode_ints,
    int_bytes,
    lp,
    seed_bytes,
)

BACKEND = "mock"


@dataclass(frozen=True, eq=False)
class MockPublicKey(PublicKey):
    _secret: int = field(default=0, repr=False)

    @property
    def plaintext_modulus(self) -> int:
        return 1 << self.params.modulus_bits

    def to_bytes(self) -> bytes:
        return lp(BACKEND.encode()) + lp(self.key_id) + encode_ints(self.t, self.m, self.params.modulus_bits)

    def _share_secret(self, index: int) -> bytes:
        return hashlib.sha256(b"mock-share-secret" + int_bytes(self._secret) + int_bytes(index)).digest()

    def _open(self, c: Ciphertext) -> int:
        r, x = decode_ints(c.body, 2)
        return (x - self._secret * r) % self.plaintext_modulus

    def _wrap(self, r: int, x: int) -> Ciphertext:
        mod = self.plaintext_modulus
        return Ciphertext(BACKEND, self.key_id, encode_ints(r % mod, x % mod))

    def encrypt(self, value: int, seed: Seed) -> Ciphertext:
        if not 0 <= value < self.plaintext_modulus:
            raise PlaintextRangeError(f"plaintext {value} outside [0, 2^{self.params.modulus_bits})")
        stream = SeedStream(seed, b"mock-enc" + self.key_id)
        r = 1 + stream.randbelow(self.plaintext_modulus - 1)
        return self._wrap(r, value + self._secret * r)

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        r1, x1 = decode_ints(a.body, 2)
        r2, x2 = decode_ints(b.body, 2)
        return self._wrap(r1 + r2, x1 + x2)

    def scale(self, c: Ciphertext, k: int) -> Ciphertext:
        r, x = decode_ints(c.body, 2)
        return self._wrap(r * k, x * k)

    def _binding(self, c: Ciphertext, domain: ValueDomain) -> bytes:
        return hashlib.sha256(b"mock-membership" + lp(self.to_bytes()) + lp(domain.to_bytes()) + lp(c.to_bytes())).digest()

    def prove_membership(self, value: int, seed: Seed, domain: ValueDomain):
        c = self.encrypt(value, seed)
        return c, MembershipProof(self._binding(c, domain))

    def forge_membership(self, c: Ciphertext, domain: ValueDomain) -> MembershipProof:
        """What a cheating prover can produce for any ciphertext."""
        return MembershipProof(self._binding(c, domain))

    def verify_membership(self, c: Ciphertext, domain: ValueDomain, proof: MembershipProof) -> bool:
        if proof.transcript != self._binding(c, domain):
            return False
        try:
            return self._open(c) in domain
        except ValueError:
            return False

    def _share_value(self, index: int, c: Ciphertext) -> bytes:
        return hashlib.sha256(b"mock-dec-share" + self._share_secret(index) + c.to_bytes()).digest()

    def _share_proof(self, index: int, c: Ciphertext, value: bytes) -> bytes:
        return hashlib.sha256(b"mock-share-proof" + self.key_id + int_bytes(index) + value + c.to_bytes()).digest()

    def verify_share(self, c: Ciphertext, share: DecryptionShare) -> bool:
        if share.key_id != self.key_id or not 1 <= share.index <= self.m:
            return False
        expected = self._share_value(share.index, c)
        return share.value == expected and share.proof.transcript == self._share_proof(share.index, c, expected)

    def combine(self, c: Ciphertext, shares) -> int:
        valid = {}
        for s in shares:
            if s.index not in valid and self.verify_share(c, s):
                valid[s.index] = s
        if len(valid) < self.t:
            raise InsufficientSharesError(f"{len(valid)} valid shares, need {self.t}")
        return self._open(c)


@dataclass(frozen=True, eq=False)
class MockSecretShare(SecretShare):
    def decrypt_share(self, c: Ciphertext) -> DecryptionShare:
        pk: MockPublicKey = self.public_key
        value = pk._share_value(self.index, c)
        return DecryptionShare(self.index, pk.key_id, value, ShareProof(pk._share_proof(self.index, c, value)))


def keygen(params: SecurityParams, t: int, m: int, seed: Seed):
    stream = SeedStream(seed, b"mock-keygen")
    secret = stream.randbits(params.modulus_bits) | 1
    key_id = hashlib.sha256(b"mock-key" + seed_bytes(seed) + int_bytes(secret)).digest()[:16]
    pk = MockPublicKey(BACKEND, key_id, t, m, params, secret)
    return pk, [MockSecretShare(i, pk) for i in range(1, m + 1)]
