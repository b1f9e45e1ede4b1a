"""Types, encodings and helpers shared by the crypto backends."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

Seed = Union[int, bytes, str]

_LEN = struct.Struct(">I")


class CryptoError(Exception):
    """Base class for crypto-layer failures."""


class ParameterError(CryptoError, ValueError):
    pass


class PlaintextRangeError(CryptoError, ValueError):
    pass


class KeyMismatchError(CryptoError, TypeError):
    """Operands belong to different keys or backends."""


class InsufficientSharesError(CryptoError):
    pass


def seed_bytes(seed: Seed) -> bytes:
    # type tag keeps 0, b"\x00" and "0" distinct
    if isinstance(seed, bool):
        raise ParameterError("bool is not a seed")
    if isinstance(seed, int):
        if seed < 0:
            raise ParameterError("integer seeds must be non-negative")
        return b"i" + seed.to_bytes(max(1, (seed.bit_length() + 7) // 8), "big")
    if isinstance(seed, bytes):
        return b"b" + seed
    if isinstance(seed, str):
        return b"s" + seed.encode()
    raise ParameterError(f"unsupported seed type {type(seed).__name__}")


def lp(data: bytes) -> bytes:
    """Length-prefix ``data`` with a 4-byte big-endian length."""
    return _LEN.pack(len(data)) + data


def int_bytes(x: int, length: int | None = None) -> bytes:
    if x < 0:
        raise ValueError("only non-negative integers are encoded")
    if length is None:
        length = max(1, (x.bit_length() + 7) // 8)
    return x.to_bytes(length, "big")


def encode_ints(*values: int) -> bytes:
    return b"".join(lp(int_bytes(v)) for v in values)


def split_lp(data: bytes) -> list[bytes]:
    """Inverse of a concatenation of :func:`lp` fields; ValueError if malformed."""
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated length prefix")
        (size,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + size > len(data):
            raise ValueError("truncated field")
        out.append(data[pos : pos + size])
        pos += size
    return out


def decode_ints(data: bytes, count: int | None = None) -> list[int]:
    fields = split_lp(data)
    if count is not None and len(fields) != count:
        raise ValueError(f"expected {count} integers, found {len(fields)}")
    if any(len(f) == 0 for f in fields):
        raise ValueError("empty integer field")
    return [int.from_bytes(f, "big") for f in fields]


class SeedStream:
    """Deterministic byte stream: SHA-256 in counter mode over a seed and label."""

    def __init__(self, seed: Seed, label: bytes = b""):
        self._key = hashlib.sha256(b"ringagg/stream" + lp(label) + lp(seed_bytes(seed))).digest()
        self._counter = 0

    def randbytes(self, k: int) -> bytes:
        chunks = []
        while sum(map(len, chunks)) < k:
            chunks.append(hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest())
            self._counter += 1
        return b"".join(chunks)[:k]

    def randbits(self, k: int) -> int:
        if k <= 0:
            return 0
        raw = int.from_bytes(self.randbytes((k + 7) // 8), "big")
        return raw >> (8 * ((k + 7) // 8) - k)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        k = n.bit_length()
        while True:
            x = self.randbits(k)
            if x < n:
                return x


@dataclass(frozen=True)
class SecurityParams:
    """Key size and the ciphertext size used for byte accounting.

    ``modulus_bits`` below 512 is insecure and meant for tests only.
    """

    modulus_bits: int = 128
    nominal_ciphertext_bits: int | None = None

    def __post_init__(self):
        if self.modulus_bits < 16:
            raise ParameterError("modulus_bits must be at least 16")
        if self.nominal_ciphertext_bits is None:
            object.__setattr__(self, "nominal_ciphertext_bits", 2 * self.modulus_bits)
        if self.nominal_ciphertext_bits < self.modulus_bits:
            raise ParameterError("nominal_ciphertext_bits must be >= modulus_bits")

    @property
    def challenge_bits(self) -> int:
        # must stay below the smallest prime factor of the modulus
        return max(4, min(128, self.modulus_bits // 2 - 2))

    # nominal wire sizes, identical for both backends
    @property
    def ciphertext_bytes(self) -> int:
        return (self.nominal_ciphertext_bits + 7) // 8

    @property
    def modulus_bytes(self) -> int:
        return (self.nominal_ciphertext_bits + 15) // 16

    @property
    def challenge_bytes(self) -> int:
        return (min(128, self.nominal_ciphertext_bits // 4) + 7) // 8

    def public_key_size(self) -> int:
        return self.modulus_bytes + 8

    def membership_proof_size(self, d: int) -> int:
        return d * (self.challenge_bytes + self.modulus_bytes)

    def input_size(self, d: int) -> int:
        return self.ciphertext_bytes + self.membership_proof_size(d)

    def decryption_share_size(self) -> int:
        # share value, challenge, response of |n^2| + 2 challenge lengths
        return 4 + 2 * self.ciphertext_bytes + 3 * self.challenge_bytes


@dataclass(frozen=True)
class ValueDomain:
    """The admissible plaintext inputs, strictly increasing and non-negative."""

    values: tuple[int, ...]

    def __init__(self, values: Iterable[int]):
        vals = tuple(int(v) for v in values)
        if not vals:
            raise ParameterError("domain must be non-empty")
        if vals[0] < 0:
            raise ParameterError("domain values must be non-negative")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ParameterError("domain values must be strictly increasing")
        object.__setattr__(self, "values", vals)

    def __contains__(self, value: object) -> bool:
        return value in self.values

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    @property
    def max(self) -> int:
        return self.values[-1]

    def index(self, value: int) -> int:
        return self.values.index(value)

    def to_bytes(self) -> bytes:
        return encode_ints(*self.values)


@dataclass(frozen=True)
class Ciphertext:
    backend: str
    key_id: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return lp(self.backend.encode()) + lp(self.key_id) + lp(self.body)

    def __repr__(self) -> str:
        return f"Ciphertext({self.backend}, {self.body[:6].hex()}..)"


@dataclass(frozen=True)
class MembershipProof:
    transcript: bytes


@dataclass(frozen=True)
class ShareProof:
    transcript: bytes


@dataclass(frozen=True)
class DecryptionShare:
    index: int
    key_id: bytes
    value: bytes
    proof: ShareProof


@dataclass(frozen=True, eq=False)
class PublicKey:
    """Backend-independent part of a threshold public key."""

    backend: str
    key_id: bytes
    t: int
    m: int
    params: SecurityParams = field(repr=False)

    def __post_init__(self):
        if not 1 < self.t <= self.m:
            raise ParameterError(f"need 1 < t <= m, got t={self.t}, m={self.m}")

    def __eq__(self, other):
        return isinstance(other, PublicKey) and self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.key_id)

    @property
    def plaintext_modulus(self) -> int:
        raise NotImplementedError

    def to_bytes(self) -> bytes:
        raise NotImplementedError

    def check(self, *cts: Ciphertext) -> None:
        for c in cts:
            if not isinstance(c, Ciphertext) or c.backend != self.backend or c.key_id != self.key_id:
                raise KeyMismatchError("ciphertext does not belong to this key")


@dataclass(frozen=True, eq=False)
class SecretShare:
    index: int
    public_key: PublicKey = field(repr=False)

    @property
    def key_id(self) -> bytes:
        return self.public_key.key_id


def derive_common_randomness(items: Sequence[Ciphertext | bytes]) -> bytes:
    """Hash an ordered list of ciphertexts (or raw byte strings) to a 32-byte seed."""
    if not items:
        raise ParameterError("need at least one item")
    h = hashlib.sha256(b"ringagg/common-randomness")
    for item in items:
        h.update(lp(item.to_bytes() if isinstance(item, Ciphertext) else bytes(item)))
    return h.digest()
