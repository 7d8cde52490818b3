"""Client-side cryptographic primitives.

Patient identifiers (PIDs) are 16 random bytes. An encryption "layer" XORs an
AES-256-CTR keystream onto the 16-byte body and records (key_id, nonce) as
public metadata, so layers commute: any layer can be removed regardless of the
order in which layers were applied. This is what lets a doctor strip his own
layer from a doubly-encrypted PID and hand the remaining single-layer EPID to
a delegate.

Keystream contract (bit-exact, shared with every other component): AES-256,
counter block = the 16-byte layer nonce, counter incremented big-endian in the
low 32 bits, wrapping mod 2^32.

Obfuscation keys are derived from a canonical personal-data string by an
iterated SHA-256 chain; the iteration count is the work-hardening parameter
that makes bulk key-guessing expensive.
"""

from __future__ import annotations

import hashlib
import random
import secrets
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import DuplicateLayer, InvalidInput, LayerNotFound

PID_LEN = 16
KEY_LEN = 32
KEY_ID_LEN = 8
NONCE_LEN = 16

DEFAULT_WORK_FACTOR = 2 ** 16  # obfuscation-key hardening iterations


def _random_bytes(n: int, rng: random.Random | None = None) -> bytes:
    # rng is only supplied by the deterministic scenario harness
    if rng is not None:
        return rng.randbytes(n)
    return secrets.token_bytes(n)


def keystream(key_bytes: bytes, nonce: bytes, length: int) -> bytes:
    """AES-256 keystream per the contract above (low-32-bit counter)."""
    if len(key_bytes) != KEY_LEN:
        raise InvalidInput(f"key must be {KEY_LEN} bytes")
    if len(nonce) != NONCE_LEN:
        raise InvalidInput(f"nonce must be {NONCE_LEN} bytes")
    if length < 0:
        raise InvalidInput("length must be non-negative")
    nblocks = (length + 15) // 16
    prefix = nonce[:12]
    base = int.from_bytes(nonce[12:], "big")
    blocks = b"".join(
        prefix + ((base + i) & 0xFFFFFFFF).to_bytes(4, "big") for i in range(nblocks)
    )
    enc = Cipher(algorithms.AES(key_bytes), modes.ECB()).encryptor()
    return (enc.update(blocks) + enc.finalize())[:length]


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


@dataclass(frozen=True)
class PatientIdentifier:
    """16-byte opaque pseudonym; never derived from identity data."""

    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != PID_LEN:
            raise InvalidInput(f"PID must be {PID_LEN} bytes")

    @property
    def hex(self) -> str:
        return self.bytes.hex()

    @classmethod
    def from_hex(cls, s: str) -> "PatientIdentifier":
        return cls(bytes.fromhex(s))


def generate_pid(rng: random.Random | None = None) -> PatientIdentifier:
    """Fresh uniformly random PID."""
    return PatientIdentifier(_random_bytes(PID_LEN, rng))


def key_id_of(key_bytes: bytes) -> bytes:
    """Public 8-byte identifier: truncated SHA-256 of the secret bytes."""
    return hashlib.sha256(key_bytes).digest()[:KEY_ID_LEN]


@dataclass(frozen=True)
class SecretKey:
    """32 secret bytes plus the derived public key_id.

    key_bytes must never appear in a wire message or a persisted store;
    only key_id is public.
    """

    key_bytes: bytes
    key_id: bytes = b""

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise InvalidInput(f"secret key must be {KEY_LEN} bytes")
        if not self.key_id:
            object.__setattr__(self, "key_id", key_id_of(self.key_bytes))
        elif self.key_id != key_id_of(self.key_bytes):
            raise InvalidInput("key_id does not match key_bytes")


def generate_key(rng: random.Random | None = None) -> SecretKey:
    """Fresh 32-byte secret key."""
    return SecretKey(_random_bytes(KEY_LEN, rng))


@dataclass(frozen=True)
class EncryptionLayer:
    """Public metadata for one applied keystream: (key_id, nonce)."""

    key_id: bytes
    nonce: bytes

    def to_dict(self) -> dict:
        return {"key_id": self.key_id.hex(), "nonce": self.nonce.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncryptionLayer":
        return cls(bytes.fromhex(d["key_id"]), bytes.fromhex(d["nonce"]))


@dataclass(frozen=True)
class LayeredCiphertext:
    """A PID body under zero or more XOR layers.

    Layer order in the list is historical, not semantic: removing layers in
    any order yields the same bodies. Zero layers means the body IS the
    plaintext PID, a state that must never leave a master terminal.
    """

    body: bytes
    layers: tuple[EncryptionLayer, ...] = ()

    def __post_init__(self):
        if len(self.body) != PID_LEN:
            raise InvalidInput(f"body must be {PID_LEN} bytes")
        seen = set()
        for layer in self.layers:
            pair = (layer.key_id, layer.nonce)
            if pair in seen:
                raise InvalidInput("duplicate (key_id, nonce) layer")
            seen.add(pair)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def has_layer(self, key_id: bytes) -> bool:
        return any(l.key_id == key_id for l in self.layers)

    def serialize(self) -> bytes:
        """body (16) | layer count (1) | per layer: key_id (8) | nonce (16)."""
        if len(self.layers) > 255:
            raise InvalidInput("too many layers")
        out = bytearray(self.body)
        out.append(len(self.layers))
        for layer in self.layers:
            out += layer.key_id
            out += layer.nonce
        return bytes(out)

    @classmethod
    def deserialize(cls, raw: bytes) -> "LayeredCiphertext":
        if len(raw) < PID_LEN + 1:
            raise InvalidInput("layered ciphertext too short")
        body = raw[:PID_LEN]
        count = raw[PID_LEN]
        expect = PID_LEN + 1 + count * (KEY_ID_LEN + NONCE_LEN)
        if len(raw) != expect:
            raise InvalidInput("layered ciphertext length mismatch")
        layers = []
        off = PID_LEN + 1
        for _ in range(count):
            layers.append(
                EncryptionLayer(raw[off : off + KEY_ID_LEN], raw[off + KEY_ID_LEN : off + KEY_ID_LEN + NONCE_LEN])
            )
            off += KEY_ID_LEN + NONCE_LEN
        return cls(body, tuple(layers))

    @property
    def hex(self) -> str:
        return self.serialize().hex()

    @classmethod
    def from_hex(cls, s: str) -> "LayeredCiphertext":
        return cls.deserialize(bytes.fromhex(s))


def wrap_pid(pid: PatientIdentifier) -> LayeredCiphertext:
    """Plaintext PID as a zero-layer ciphertext (master-terminal use only)."""
    return LayeredCiphertext(pid.bytes)


def add_layer(
    ct: LayeredCiphertext,
    key: SecretKey,
    *,
    nonce: bytes | None = None,
    rng: random.Random | None = None,
) -> LayeredCiphertext:
    """XOR a fresh keystream onto the body and record the layer.

    A second layer under the same key_id is refused: it would not cancel on
    removal (different nonce) and leaves the ciphertext undecryptable.
    """
    if ct.has_layer(key.key_id):
        raise DuplicateLayer(f"layer {key.key_id.hex()} already present")
    if nonce is None:
        nonce = _random_bytes(NONCE_LEN, rng)
    elif len(nonce) != NONCE_LEN:
        raise InvalidInput(f"nonce must be {NONCE_LEN} bytes")
    body = _xor(ct.body, keystream(key.key_bytes, nonce, PID_LEN))
    return LayeredCiphertext(body, ct.layers + (EncryptionLayer(key.key_id, nonce),))


def remove_layer(ct: LayeredCiphertext, key: SecretKey) -> LayeredCiphertext:
    """XOR out the layer recorded for key.key_id, using its stored nonce.

    Wrong key_bytes behind a matching key_id silently yields garbage; that is
    only detectable downstream (the resulting PID will not resolve).
    """
    for i, layer in enumerate(ct.layers):
        if layer.key_id == key.key_id:
            body = _xor(ct.body, keystream(key.key_bytes, layer.nonce, PID_LEN))
            return LayeredCiphertext(body, ct.layers[:i] + ct.layers[i + 1 :])
    raise LayerNotFound(f"no layer for key_id {key.key_id.hex()}")


@dataclass(frozen=True)
class ObfuscationKey:
    """Deterministic key over (deployment salt, canonical personal data)."""

    key_bytes: bytes
    iterations: int


def derive_obfuscation_key(personal: str, salt: bytes, iterations: int = DEFAULT_WORK_FACTOR) -> ObfuscationKey:
    """Iterated SHA-256 chain of the given length over salt || personal.

    iterations=1 is a single digest; each further iteration rehashes the
    previous digest, so key(n+1) = SHA-256(key(n)). The chain length is the
    proof-of-work parameter: honest derivation pays it once, an attacker
    guessing personal data pays it per guess.
    """
    if not personal:
        raise InvalidInput("personal-data string must be non-empty")
    if iterations < 1:
        raise InvalidInput("iterations must be >= 1")
    digest = hashlib.sha256(salt + personal.encode("utf-8")).digest()
    for _ in range(iterations - 1):
        digest = hashlib.sha256(digest).digest()
    return ObfuscationKey(digest, iterations)


@dataclass(frozen=True)
class ObfuscatedBlob:
    """Stream-obfuscated field value plus its clear keyword index.

    Keywords are supplied by the author at entry time, never derived from the
    plaintext, and are stored in clear to keep search possible.
    """

    nonce: bytes
    ciphertext: bytes
    keyword_index: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.nonce) != NONCE_LEN:
            raise InvalidInput(f"nonce must be {NONCE_LEN} bytes")
        if not self.ciphertext:
            raise InvalidInput("ciphertext must be non-empty")

    def to_dict(self) -> dict:
        return {
            "nonce": self.nonce.hex(),
            "ciphertext": self.ciphertext.hex(),
            "keywords": list(self.keyword_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObfuscatedBlob":
        try:
            return cls(
                bytes.fromhex(d["nonce"]),
                bytes.fromhex(d["ciphertext"]),
                tuple(d.get("keywords", ())),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidInput(f"malformed obfuscated blob: {exc}")


def obfuscate(
    plaintext: bytes,
    okey: ObfuscationKey,
    keywords: list[str] | tuple[str, ...] = (),
    *,
    nonce: bytes | None = None,
    rng: random.Random | None = None,
) -> ObfuscatedBlob:
    """Stream-encrypt a field value under an obfuscation key."""
    if not plaintext:
        raise InvalidInput("plaintext must be non-empty")
    if nonce is None:
        nonce = _random_bytes(NONCE_LEN, rng)
    ct = _xor(plaintext, keystream(okey.key_bytes, nonce, len(plaintext)))
    return ObfuscatedBlob(nonce, ct, tuple(keywords))


def deobfuscate(blob: ObfuscatedBlob, okey: ObfuscationKey) -> bytes:
    """Inverse of obfuscate. No integrity check: a wrong key yields garbage."""
    return _xor(blob.ciphertext, keystream(okey.key_bytes, blob.nonce, len(blob.ciphertext)))
