"""Threshold Paillier (Damgard-Jurik, s = 1) with a trusted dealer.

Key material follows the usual construction: ``n = pq`` with safe primes
``p = 2p'+1``, ``q = 2q'+1``; the secret exponent ``d`` satisfies
``d = 0 mod p'q'`` and ``d = 1 mod n`` and is Shamir-shared over
``Z_{n p'q'}``. Decryption shares are ``c^(2*Delta*s_i)`` with ``Delta = m!``.

Two Fiat-Shamir proofs are provided: a 1-out-of-d OR proof that a ciphertext
encrypts one of the domain values, and an equality-of-discrete-logs proof for
decryption shares. Moduli below 512 bits are insecure and for tests only.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import gmpy2

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
)

BACKEND = "paillier"


def _is_prime(x: int) -> bool:
    return bool(gmpy2.is_prime(x, 40))


def safe_prime(bits: int, stream: SeedStream) -> int:
    """Random safe prime of exactly ``bits`` bits whose top two bits are set."""
    if bits < 5:
        raise ValueError("safe primes need at least 5 bits")
    sub = bits - 1
    while True:
        cand = stream.randbits(sub) | (0b11 << (sub - 2)) | 1
        if _is_prime(cand) and _is_prime(2 * cand + 1):
            return 2 * cand + 1


def _hash_int(bits: int, *parts: bytes) -> int:
    h = hashlib.sha256(b"".join(lp(p) for p in parts)).digest()
    while len(h) * 8 < bits:
        h += hashlib.sha256(h).digest()
    return int.from_bytes(h, "big") >> (len(h) * 8 - bits)


@dataclass(frozen=True, eq=False)
class PaillierPublicKey(PublicKey):
    n: int = 0
    v: int = 0
    verification_keys: tuple[int, ...] = field(default=(), repr=False)

    @property
    def n2(self) -> int:
        return self.n * self.n

    @property
    def delta(self) -> int:
        return math.factorial(self.m)

    @property
    def plaintext_modulus(self) -> int:
        return self.n

    @property
    def _ct_len(self) -> int:
        return (self.n2.bit_length() + 7) // 8

    def to_bytes(self) -> bytes:
        return lp(BACKEND.encode()) + encode_ints(self.t, self.m, self.n, self.v, *self.verification_keys)

    # -- ciphertext plumbing -------------------------------------------------

    def _wrap(self, c: int) -> Ciphertext:
        return Ciphertext(BACKEND, self.key_id, int_bytes(c, self._ct_len))

    def _value(self, c: Ciphertext) -> int:
        x = int.from_bytes(c.body, "big")
        if len(c.body) != self._ct_len or not 0 < x < self.n2 or math.gcd(x, self.n) != 1:
            raise ValueError("not an element of Z*_{n^2}")
        return x

    def _unit_below(self, bound: int, stream: SeedStream) -> int:
        while True:
            r = stream.randbelow(bound)
            if r > 0 and math.gcd(r, self.n) == 1:
                return r

    def _encrypt_with(self, value: int, r: int) -> int:
        n, n2 = self.n, self.n2
        return (1 + value * n) % n2 * pow(r, n, n2) % n2

    def _randomness(self, seed: Seed) -> int:
        return self._unit_below(self.n, SeedStream(seed, b"paillier-enc" + self.key_id))

    def encrypt(self, value: int, seed: Seed) -> Ciphertext:
        if not 0 <= value < self.n:
            raise PlaintextRangeError(f"plaintext {value} outside [0, n)")
        return self._wrap(self._encrypt_with(value, self._randomness(seed)))

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self._wrap(self._value(a) * self._value(b) % self.n2)

    def scale(self, c: Ciphertext, k: int) -> Ciphertext:
        return self._wrap(pow(self._value(c), k % self.n, self.n2))

    # -- membership (1-out-of-d) proof ---------------------------------------

    def _membership_challenge(self, c: Ciphertext, domain: ValueDomain, commitments) -> int:
        return _hash_int(
            self.params.challenge_bits,
            b"paillier-membership",
            self.to_bytes(),
            domain.to_bytes(),
            c.to_bytes(),
            encode_ints(*commitments),
        )

    def _shifted(self, cval: int, nu: int) -> int:
        # c * (1+n)^(-nu) = c * (1 - nu*n) mod n^2
        n, n2 = self.n, self.n2
        return cval * ((1 - nu * n) % n2) % n2

    def prove_membership(self, value: int, seed: Seed, domain: ValueDomain):
        if not 0 <= value < self.n:
            raise PlaintextRangeError(f"plaintext {value} outside [0, n)")
        r = self._randomness(seed)
        cval = self._encrypt_with(value, r)
        c = self._wrap(cval)
        n, n2, cb = self.n, self.n2, self.params.challenge_bits
        stream = SeedStream(seed, b"paillier-membership" + self.key_id + domain.to_bytes())
        us = [self._shifted(cval, nu) for nu in domain]
        k = domain.index(value) if value in domain else None
        while True:
            es, zs, commitments = [], [], []
            rho = self._unit_below(n, stream)
            for j, u in enumerate(us):
                if j == k:
                    es.append(0)
                    zs.append(0)
                    commitments.append(pow(rho, n, n2))
                else:
                    e = stream.randbits(cb)
                    z = self._unit_below(n, stream)
                    es.append(e)
                    zs.append(z)
                    commitments.append(pow(z, n, n2) * pow(u, -e, n2) % n2)
            big_e = self._membership_challenge(c, domain, commitments)
            if k is not None:
                es[k] = (big_e - sum(es)) % (1 << cb)
                zs[k] = rho * pow(r, es[k], n) % n
                break
            if sum(es) % (1 << cb) != big_e:
                break  # no witness: leave the transcript inconsistent
        return c, MembershipProof(encode_ints(*es, *zs))

    def verify_membership(self, c: Ciphertext, domain: ValueDomain, proof: MembershipProof) -> bool:
        d = len(domain)
        n, n2, cb = self.n, self.n2, self.params.challenge_bits
        try:
            cval = self._value(c)
            nums = decode_ints(proof.transcript, 2 * d)
        except ValueError:
            return False
        if proof.transcript != encode_ints(*nums):
            return False  # non-canonical encoding
        es, zs = nums[:d], nums[d:]
        commitments = []
        for e, z, nu in zip(es, zs, domain):
            if e >> cb or not 0 < z < n or math.gcd(z, n) != 1:
                return False
            u = self._shifted(cval, nu)
            commitments.append(pow(z, n, n2) * pow(u, -e, n2) % n2)
        return sum(es) % (1 << cb) == self._membership_challenge(c, domain, commitments)

    # -- decryption shares ---------------------------------------------------

    def _share_challenge(self, c: Ciphertext, index: int, ci: int, a: int, b: int) -> int:
        return _hash_int(
            self.params.challenge_bits,
            b"paillier-share",
            self.to_bytes(),
            c.to_bytes(),
            encode_ints(index, ci, a, b),
        )

    def verify_share(self, c: Ciphertext, share: DecryptionShare) -> bool:
        if share.key_id != self.key_id or not 1 <= share.index <= self.m:
            return False
        n, n2 = self.n, self.n2
        try:
            cval = self._value(c)
            (ci,) = decode_ints(share.value, 1)
            e, z = decode_ints(share.proof.transcript, 2)
        except ValueError:
            return False
        if share.value != encode_ints(ci) or share.proof.transcript != encode_ints(e, z):
            return False
        if not 0 < ci < n2 or math.gcd(ci, n) != 1 or e >> self.params.challenge_bits:
            return False
        if z.bit_length() > n2.bit_length() + 2 * self.params.challenge_bits + self.delta.bit_length() + 8:
            return False
        c4 = pow(cval, 4, n2)
        vi = self.verification_keys[share.index - 1]
        a = pow(c4, z, n2) * pow(ci * ci % n2, -e, n2) % n2
        b = pow(self.v, z, n2) * pow(vi, -e, n2) % n2
        return e == self._share_challenge(c, share.index, ci, a, b)

    def combine(self, c: Ciphertext, shares) -> int:
        valid = {}
        for s in shares:
            if s.index not in valid and self.verify_share(c, s):
                valid[s.index] = s
        if len(valid) < self.t:
            raise InsufficientSharesError(f"{len(valid)} valid shares, need {self.t}")
        chosen = sorted(valid)[: self.t]
        n, n2, delta = self.n, self.n2, self.delta
        acc = 1
        for i in chosen:
            num, den = delta, 1
            for j in chosen:
                if j != i:
                    num *= -j
                    den *= i - j
            lam = num // den  # exact: Delta clears the denominators
            (ci,) = decode_ints(valid[i].value, 1)
            acc = acc * pow(ci, 2 * lam, n2) % n2
        ell = (acc - 1) // n
        return ell * pow(4 * delta * delta, -1, n) % n


@dataclass(frozen=True, eq=False)
class PaillierSecretShare(SecretShare):
    secret: int = field(default=0, repr=False)

    def decrypt_share(self, c: Ciphertext) -> DecryptionShare:
        pk: PaillierPublicKey = self.public_key
        n2, cb, delta = pk.n2, pk.params.challenge_bits, pk.delta
        cval = pk._value(c)
        exponent = 2 * delta * self.secret
        ci = pow(cval, exponent, n2)
        # deterministic nonce derived from the secret and the statement
        stream = SeedStream(int_bytes(self.secret) + c.to_bytes(), b"paillier-share-nonce")
        r = stream.randbits(n2.bit_length() + 2 * cb + delta.bit_length())
        c4 = pow(cval, 4, n2)
        a = pow(c4, r, n2)
        b = pow(pk.v, r, n2)
        e = pk._share_challenge(c, self.index, ci, a, b)
        z = r + e * delta * self.secret
        return DecryptionShare(self.index, pk.key_id, encode_ints(ci), ShareProof(encode_ints(e, z)))


def keygen(params: SecurityParams, t: int, m: int, seed: Seed):
    stream = SeedStream(seed, b"paillier-keygen")
    half = params.modulus_bits // 2
    while True:
        p = safe_prime(half, stream)
        q = safe_prime(params.modulus_bits - half, stream)
        pp, qq = (p - 1) // 2, (q - 1) // 2
        if p != q and min(pp, qq) > m:
            break
    n = p * q
    n2 = n * n
    mm = pp * qq
    nm = n * mm
    d = mm * pow(mm, -1, n) % nm
    coeffs = [d] + [stream.randbelow(nm) for _ in range(t - 1)]
    secrets = [sum(a * pow(i, j) for j, a in enumerate(coeffs)) % nm for i in range(1, m + 1)]
    while True:
        r = stream.randbelow(n2)
        if r > 1 and math.gcd(r, n) == 1:
            break
    v = r * r % n2
    delta = math.factorial(m)
    vks = tuple(pow(v, delta * s, n2) for s in secrets)
    key_id = hashlib.sha256(b"paillier-key" + encode_ints(n, v, *vks)).digest()[:16]
    pk = PaillierPublicKey(BACKEND, key_id, t, m, params, n, v, vks)
    return pk, [PaillierSecretShare(i, pk, s) for i, s in enumerate(secrets, start=1)]
