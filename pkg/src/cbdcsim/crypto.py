"""Blind-issuance signatures and nullifier derivation.

One RSA-FDH scheme backs everything that needs a signature: token issuance
(blinded), entry attribution, and consensus votes. Verification keys bind
(vintage, denomination) so anyone can check what a token is worth without
learning where it came from; blinding makes the issuer's own signing
transcript useless for linking issuance to redemption.

All randomness comes from caller-supplied seeded streams; key generation is
deterministic per (label, seed, bits) and cached process-wide.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

import gmpy2
from gmpy2 import mpz

DEFAULT_RSA_BITS = 1024
_PUBLIC_EXPONENT = 65537

TOKEN_TAG = "token"
NULLIFIER_TAG = "null"


def tagged_hash(tag: str, *chunks: bytes) -> bytes:
    """SHA-256 with an ASCII domain tag; every hash use in the system has one."""
    h = hashlib.sha256()
    tag_bytes = tag.encode("ascii")
    h.update(len(tag_bytes).to_bytes(1, "big"))
    h.update(tag_bytes)
    for chunk in chunks:
        h.update(len(chunk).to_bytes(8, "big"))
        h.update(chunk)
    return h.digest()


def nullifier(serial: bytes) -> bytes:
    """Deterministic spend tag for a token serial, domain-separated."""
    return tagged_hash(NULLIFIER_TAG, serial)


def stream_seed(master_seed: int, label: str) -> int:
    """Derive an independent RNG seed for a named stream."""
    raw = tagged_hash("stream", master_seed.to_bytes(16, "big", signed=False), label.encode("utf-8"))
    return int.from_bytes(raw, "big")


def rng_stream(master_seed: int, label: str) -> random.Random:
    return random.Random(stream_seed(master_seed, label))


@dataclass(frozen=True)
class PublicKey:
    n: int
    e: int

    @property
    def byte_len(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def to_json(self) -> dict:
        return {"n": hex(self.n), "e": self.e}

    @staticmethod
    def from_json(obj: dict) -> "PublicKey":
        return PublicKey(int(obj["n"], 16), int(obj["e"]))


@dataclass(frozen=True)
class KeyPair:
    """RSA key with CRT parameters precomputed for fast signing."""

    n: mpz
    e: mpz
    d: mpz
    p: mpz
    q: mpz
    dp: mpz
    dq: mpz
    qinv: mpz

    def public(self) -> PublicKey:
        return PublicKey(int(self.n), int(self.e))

    def _private_op(self, m: mpz) -> mpz:
        m1 = gmpy2.powmod(m % self.p, self.dp, self.p)
        m2 = gmpy2.powmod(m % self.q, self.dq, self.q)
        return m2 + self.q * ((self.qinv * (m1 - m2)) % self.p)


_key_cache: dict[tuple[str, int, int], KeyPair] = {}


def _gen_prime(rng: random.Random, bits: int) -> mpz:
    start = mpz(rng.getrandbits(bits) | (1 << (bits - 1)) | 1)
    return gmpy2.next_prime(start)


def generate_keypair(label: str, seed: int, bits: int = DEFAULT_RSA_BITS) -> KeyPair:
    """Deterministic keypair for a named role; identical across runs and hosts."""
    cached = _key_cache.get((label, seed, bits))
    if cached is not None:
        return cached
    rng = rng_stream(seed, "keygen/" + label)
    half = bits // 2
    e = mpz(_PUBLIC_EXPONENT)
    while True:
        p = _gen_prime(rng, half)
        q = _gen_prime(rng, half)
        if p == q:
            continue
        phi = (p - 1) * (q - 1)
        if gmpy2.gcd(e, phi) != 1:
            continue
        break
    n = p * q
    d = gmpy2.invert(e, phi)
    pair = KeyPair(n, e, d, p, q, d % (p - 1), d % (q - 1), gmpy2.invert(q, p))
    _key_cache[(label, seed, bits)] = pair
    return pair


def _fdh(tag: str, message: bytes, n: int) -> mpz:
    """Full-domain hash of a tagged message into Z_n.

    One SHAKE-256 squeeze of eight bytes beyond the modulus width keeps the
    reduction bias negligible."""
    byte_len = (n.bit_length() + 7) // 8 + 8
    h = hashlib.shake_256()
    tag_bytes = ("fdh/" + tag).encode("ascii")
    h.update(len(tag_bytes).to_bytes(1, "big"))
    h.update(tag_bytes)
    h.update(message)
    return mpz(int.from_bytes(h.digest(byte_len), "big")) % n


def _to_bytes(x: mpz, byte_len: int) -> bytes:
    return int(x).to_bytes(byte_len, "big")


def sign(key: KeyPair, tag: str, message: bytes) -> bytes:
    m = _fdh(tag, message, key.n)
    return _to_bytes(key._private_op(m), key.public().byte_len)


def verify(pk: PublicKey, tag: str, message: bytes, signature: bytes) -> bool:
    if len(signature) != pk.byte_len:
        return False
    s = mpz(int.from_bytes(signature, "big"))
    if s >= pk.n:
        return False
    return gmpy2.powmod(s, pk.e, pk.n) == _fdh(tag, message, pk.n)


# --- blind issuance --------------------------------------------------------


@dataclass(frozen=True)
class IssuerKeyPair:
    """Signing key for one (vintage, denomination); the pairing is public."""

    vintage: int
    exponent: int
    key: KeyPair

    def public(self) -> PublicKey:
        return self.key.public()


@dataclass(frozen=True)
class BlindedRequest:
    """A blinded token serial awaiting signature.

    The blinded bytes are uniform in Z_n given a fresh blinding factor, so
    they carry no computable function of the underlying serial.
    """

    blinded: bytes
    exponent: int
    vintage: int


def issuer_keypair(vintage: int, exponent: int, seed: int, bits: int = DEFAULT_RSA_BITS) -> IssuerKeyPair:
    key = generate_keypair(f"token/v{vintage}/d{exponent}", seed, bits)
    return IssuerKeyPair(vintage, exponent, key)


def blind(serial: bytes, pk: PublicKey, vintage: int, exponent: int, rng: random.Random) -> tuple[BlindedRequest, int]:
    """Blind a serial under the issuer key; returns the request and the factor."""
    n = mpz(pk.n)
    m = _fdh(TOKEN_TAG, serial, n)
    while True:
        r = mpz(rng.randrange(2, int(n)))
        if gmpy2.gcd(r, n) == 1:
            break
    blinded = (m * gmpy2.powmod(r, pk.e, n)) % n
    return BlindedRequest(_to_bytes(blinded, pk.byte_len), exponent, vintage), int(r)


def sign_blinded(key: IssuerKeyPair, request: BlindedRequest) -> bytes:
    """Sign a blinded request. Rejects requests for a different key."""
    if (request.vintage, request.exponent) != (key.vintage, key.exponent):
        raise ValueError(
            f"request for vintage {request.vintage} denom {request.exponent} "
            f"sent to key vintage {key.vintage} denom {key.exponent}"
        )
    pk = key.public()
    if len(request.blinded) != pk.byte_len:
        raise ValueError("malformed blinded request")
    m = mpz(int.from_bytes(request.blinded, "big"))
    if m >= key.key.n:
        raise ValueError("blinded request out of range")
    return _to_bytes(key.key._private_op(m), pk.byte_len)


def unblind(blinded_signature: bytes, blinding: int, pk: PublicKey) -> bytes:
    if len(blinded_signature) == 0:
        raise ValueError("empty blinded signature")
    if len(blinded_signature) != pk.byte_len:
        raise ValueError("blinded signature has wrong length")
    n = mpz(pk.n)
    s = (mpz(int.from_bytes(blinded_signature, "big")) * gmpy2.invert(mpz(blinding), n)) % n
    return _to_bytes(s, pk.byte_len)


def verify_token(pk: PublicKey, serial: bytes, signature: bytes) -> bool:
    return verify(pk, TOKEN_TAG, serial, signature)
