"""Hybrid envelope encryption for serialized model states.

A fresh 256-bit AES-GCM key encrypts each payload; the recipient's RSA-2048
public key wraps that key with OAEP-SHA256. Both keygen and wrapping are
fully deterministic given the seeded generators handed in, so simulation
runs replay bit for bit: primes come from the caller's stream, and the OAEP
seed is derived from the key material being wrapped rather than drawn from
an ambient RNG. These are reproducibility choices for a simulator, not
hardening advice.

Envelope wire format (integers little-endian):

    bytes 0..3   magic ``FENV``
    byte  4      version 0x01
    u16          wrapped key length, then the wrapped key
    12 bytes     AES-GCM nonce
    u64          ciphertext length, then the ciphertext
    16 bytes     authentication tag

A group envelope (magic ``FBND``) shares one symmetric key across several
recipients: the payload is encrypted once and the key is wrapped once per
recipient public key.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import gmpy2
import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

RSA_BITS = 2048
RSA_EXPONENT = 65537
KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
HASH_LEN = 32  # SHA-256
ENVELOPE_MAGIC = b"FENV"
GROUP_MAGIC = b"FBND"
ENVELOPE_VERSION = 1

SymmetricKey = bytes


class CryptoError(Exception):
    pass


class EmptyPlaintext(CryptoError):
    pass


class AuthenticationFailed(CryptoError):
    pass


class UnwrapFailed(CryptoError):
    pass


class CorruptEnvelope(CryptoError):
    pass


@dataclass(frozen=True)
class RsaPublicKey:
    n: int
    e: int

    @property
    def byte_length(self) -> int:
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class RsaPrivateKey:
    n: int
    e: int
    d: int
    p: int
    q: int
    dmp1: int
    dmq1: int
    iqmp: int

    def public_key(self) -> RsaPublicKey:
        return RsaPublicKey(self.n, self.e)


@dataclass(frozen=True)
class KeyPair:
    public: RsaPublicKey
    private: RsaPrivateKey


@dataclass
class Envelope:
    wrapped_key: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes


def _random_prime(rng: np.random.Generator, bits: int) -> int:
    # Top two bits forced so the product of two primes has exactly 2*bits bits.
    while True:
        raw = int.from_bytes(rng.bytes(bits // 8), "big")
        raw |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(raw))
        if p.bit_length() == bits:
            return p


def generate_keypair(rng: np.random.Generator) -> KeyPair:
    """RSA-2048 pair derived entirely from the supplied generator."""
    half = RSA_BITS // 2
    while True:
        p = _random_prime(rng, half)
        q = _random_prime(rng, half)
        n = p * q
        if p == q or n.bit_length() != RSA_BITS:
            continue
        if gmpy2.gcd(RSA_EXPONENT, (p - 1) * (q - 1)) != 1:
            continue
        break
    d = int(gmpy2.invert(RSA_EXPONENT, gmpy2.lcm(p - 1, q - 1)))
    private = RsaPrivateKey(
        n=n,
        e=RSA_EXPONENT,
        d=d,
        p=p,
        q=q,
        dmp1=d % (p - 1),
        dmq1=d % (q - 1),
        iqmp=int(gmpy2.invert(q, p)),
    )
    return KeyPair(public=private.public_key(), private=private)


def public_pem(public: RsaPublicKey) -> str:
    """Standard SubjectPublicKeyInfo PEM for ledger registration."""
    return (
        rsa.RSAPublicNumbers(public.e, public.n)
        .public_key()
        .public_bytes(
            serialization.Encoding.PEM,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )
        .decode("ascii")
    )


def load_public_pem(pem: str) -> RsaPublicKey:
    key = serialization.load_pem_public_key(pem.encode("ascii"))
    if not isinstance(key, rsa.RSAPublicKey):
        raise CryptoError("expected an RSA public key")
    numbers = key.public_numbers()
    return RsaPublicKey(numbers.n, numbers.e)


def generate_symmetric_key(rng: np.random.Generator) -> SymmetricKey:
    return rng.bytes(KEY_BYTES)


# -- RSA-OAEP (RFC 8017, SHA-256), derandomized -------------------------------


def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    for counter in range((length + HASH_LEN - 1) // HASH_LEN):
        out += hashlib.sha256(seed + struct.pack(">I", counter)).digest()
    return bytes(out[:length])


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


_L_HASH = hashlib.sha256(b"").digest()


def _oaep_encode(message: bytes, k: int, seed: bytes) -> bytes:
    if len(message) > k - 2 * HASH_LEN - 2:
        raise CryptoError(f"message too long for OAEP under a {k}-byte modulus")
    padding = b"\x00" * (k - len(message) - 2 * HASH_LEN - 2)
    db = _L_HASH + padding + b"\x01" + message
    masked_db = _xor(db, _mgf1(seed, k - HASH_LEN - 1))
    masked_seed = _xor(seed, _mgf1(masked_db, HASH_LEN))
    return b"\x00" + masked_seed + masked_db


def _oaep_decode(encoded: bytes, k: int) -> bytes:
    if len(encoded) != k or encoded[0] != 0:
        raise UnwrapFailed("OAEP decode failed")
    masked_seed = encoded[1 : 1 + HASH_LEN]
    masked_db = encoded[1 + HASH_LEN :]
    seed = _xor(masked_seed, _mgf1(masked_db, HASH_LEN))
    db = _xor(masked_db, _mgf1(seed, k - HASH_LEN - 1))
    if db[:HASH_LEN] != _L_HASH:
        raise UnwrapFailed("OAEP decode failed")
    sep = db.find(b"\x01", HASH_LEN)
    if sep < 0 or any(db[HASH_LEN:sep]):
        raise UnwrapFailed("OAEP decode failed")
    return db[sep + 1 :]


def wrap_key(public: RsaPublicKey, key: SymmetricKey) -> bytes:
    """OAEP-wrap a symmetric key under a recipient public key.

    The OAEP seed is derived from the key material and the recipient
    modulus, so wrapping is a pure function; fresh symmetric keys per seal
    keep distinct envelopes distinct.
    """
    k = public.byte_length
    seed = hashlib.sha256(
        b"fedsim-oaep-seed" + key + public.n.to_bytes(k, "big")
    ).digest()
    em = int.from_bytes(_oaep_encode(key, k, seed), "big")
    return int(gmpy2.powmod(em, public.e, public.n)).to_bytes(k, "big")


def unwrap_key(private: RsaPrivateKey, wrapped: bytes) -> SymmetricKey:
    k = (private.n.bit_length() + 7) // 8
    if len(wrapped) != k:
        raise UnwrapFailed(f"wrapped key has {len(wrapped)} bytes, expected {k}")
    c = int.from_bytes(wrapped, "big")
    if c >= private.n:
        raise UnwrapFailed("wrapped key out of range for the modulus")
    # CRT exponentiation.
    m1 = gmpy2.powmod(c, private.dmp1, private.p)
    m2 = gmpy2.powmod(c, private.dmq1, private.q)
    h = (private.iqmp * (m1 - m2)) % private.p
    m = int(m2 + h * private.q)
    key = _oaep_decode(m.to_bytes(k, "big"), k)
    if len(key) != KEY_BYTES:
        raise UnwrapFailed(f"unwrapped key has {len(key)} bytes, expected {KEY_BYTES}")
    return key


# -- symmetric layer -----------------------------------------------------------


def encrypt(
    key: SymmetricKey, plaintext: bytes, rng: np.random.Generator
) -> tuple[bytes, bytes, bytes]:
    """AES-256-GCM; returns (nonce, ciphertext, tag) with |ct| = |pt|."""
    if not plaintext:
        raise EmptyPlaintext("refusing to encrypt an empty payload")
    nonce = rng.bytes(NONCE_BYTES)
    sealed = AESGCM(key).encrypt(nonce, plaintext, None)
    return nonce, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:]


def decrypt(key: SymmetricKey, nonce: bytes, ciphertext: bytes, tag: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, ciphertext + tag, None)
    except InvalidTag as exc:
        raise AuthenticationFailed("ciphertext failed authentication") from exc


# -- envelopes -----------------------------------------------------------------


def seal_model(
    recipient_public: RsaPublicKey, model_bytes: bytes, rng: np.random.Generator
) -> Envelope:
    """Encrypt a payload under a fresh symmetric key wrapped for one recipient."""
    key = generate_symmetric_key(rng)
    nonce, ciphertext, tag = encrypt(key, model_bytes, rng)
    return Envelope(wrap_key(recipient_public, key), nonce, ciphertext, tag)


def open_model(private: RsaPrivateKey, envelope: Envelope) -> bytes:
    key = unwrap_key(private, envelope.wrapped_key)
    return decrypt(key, envelope.nonce, envelope.ciphertext, envelope.auth_tag)


def serialize_envelope(env: Envelope) -> bytes:
    return b"".join(
        (
            ENVELOPE_MAGIC,
            struct.pack("<B", ENVELOPE_VERSION),
            struct.pack("<H", len(env.wrapped_key)),
            env.wrapped_key,
            env.nonce,
            struct.pack("<Q", len(env.ciphertext)),
            env.ciphertext,
            env.auth_tag,
        )
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptEnvelope("truncated envelope")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def done(self) -> bool:
        return self.pos == len(self.data)


def deserialize_envelope(data: bytes) -> Envelope:
    r = _Reader(data)
    if r.take(4) != ENVELOPE_MAGIC:
        raise CorruptEnvelope("bad envelope magic")
    if r.u8() != ENVELOPE_VERSION:
        raise CorruptEnvelope("unsupported envelope version")
    wrapped = r.take(r.u16())
    nonce = r.take(NONCE_BYTES)
    ciphertext = r.take(r.u64())
    tag = r.take(TAG_BYTES)
    if not r.done():
        raise CorruptEnvelope("trailing bytes after envelope")
    return Envelope(wrapped, nonce, ciphertext, tag)


@dataclass
class GroupEnvelope:
    """One ciphertext, one symmetric key, wrapped per recipient address."""

    wrapped: dict[str, bytes]
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def envelope_for(self, address: str) -> Envelope:
        if address not in self.wrapped:
            raise UnwrapFailed(f"no wrapped key for recipient {address!r}")
        return Envelope(self.wrapped[address], self.nonce, self.ciphertext, self.auth_tag)


def seal_model_group(
    recipients: dict[str, RsaPublicKey],
    model_bytes: bytes,
    rng: np.random.Generator,
) -> GroupEnvelope:
    """Shared-key sealing: encrypt once, wrap the key for every recipient."""
    if not recipients:
        raise CryptoError("group envelope needs at least one recipient")
    key = generate_symmetric_key(rng)
    nonce, ciphertext, tag = encrypt(key, model_bytes, rng)
    wrapped = {addr: wrap_key(pub, key) for addr, pub in sorted(recipients.items())}
    return GroupEnvelope(wrapped, nonce, ciphertext, tag)


def open_model_group(
    address: str, private: RsaPrivateKey, group: GroupEnvelope
) -> bytes:
    return open_model(private, group.envelope_for(address))


def serialize_group_envelope(group: GroupEnvelope) -> bytes:
    parts = [GROUP_MAGIC, struct.pack("<B", ENVELOPE_VERSION)]
    parts.append(struct.pack("<H", len(group.wrapped)))
    for addr in sorted(group.wrapped):
        encoded = addr.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<H", len(group.wrapped[addr])))
        parts.append(group.wrapped[addr])
    parts.append(group.nonce)
    parts.append(struct.pack("<Q", len(group.ciphertext)))
    parts.append(group.ciphertext)
    parts.append(group.auth_tag)
    return b"".join(parts)


def deserialize_group_envelope(data: bytes) -> GroupEnvelope:
    r = _Reader(data)
    if r.take(4) != GROUP_MAGIC:
        raise CorruptEnvelope("bad group envelope magic")
    if r.u8() != ENVELOPE_VERSION:
        raise CorruptEnvelope("unsupported envelope version")
    count = r.u16()
    wrapped: dict[str, bytes] = {}
    for _ in range(count):
        try:
            addr = r.take(r.u16()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptEnvelope("recipient address is not UTF-8") from exc
        wrapped[addr] = r.take(r.u16())
    if len(wrapped) != count:
        raise CorruptEnvelope("duplicate recipient in group envelope")
    nonce = r.take(NONCE_BYTES)
    ciphertext = r.take(r.u64())
    tag = r.take(TAG_BYTES)
    if not r.done():
        raise CorruptEnvelope("trailing bytes after group envelope")
    return GroupEnvelope(wrapped, nonce, ciphertext, tag)
