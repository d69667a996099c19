"""Keys, software TPM, attestation, pseudonym certificates, EIDs and RLOCs.

Every signature in the system is Ed25519.  Identity escrow uses an
X25519 + HKDF-SHA256 + AES-256-GCM sealed box.  Key material is derived
from an injected ``random.Random``-compatible generator: production code
passes :data:`SECURE_RNG`, simulations pass a seeded generator so that runs
are reproducible.
"""

from __future__ import annotations

import ipaddress
import json
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import b64d, b64e, hex128, pack_fields, parse_hex128, unpack_fields

SECURE_RNG: random.Random = random.SystemRandom()

EID_BYTES = 16
DEVICE_ID_BYTES = 16
MINUTE_MS = 60_000
DEFAULT_CERT_LIFETIME_MS = 10 * MINUTE_MS
DEFAULT_ROTATION_PERIOD_MS = 30 * MINUTE_MS

PERMISSION_PUBLISH = "publish-events"
PERMISSION_MAP_SERVICE = "map-service"
PERMISSION_FORWARD = "forward-events"
ROLE_PERMISSIONS = {
    "client": frozenset({PERMISSION_PUBLISH}),
    "mapping": frozenset({PERMISSION_MAP_SERVICE, PERMISSION_FORWARD}),
}


# --------------------------------------------------------------------------
# Primitive wrappers


def new_signing_key(rng: random.Random = SECURE_RNG) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))


def public_bytes(key: Ed25519PrivateKey | X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def _raw_private(key: Ed25519PrivateKey | X25519PrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    )


def new_encryption_key(rng: random.Random = SECURE_RNG) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(rng.randbytes(32))


class SealError(Exception):
    pass


def _seal_key(shared: bytes, ephemeral: bytes, recipient: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=b"nexagon-seal" + ephemeral + recipient
    ).derive(shared)


def seal(recipient_public: bytes, plaintext: bytes, rng: random.Random = SECURE_RNG, aad: bytes = b"") -> bytes:
    """Encrypt to an X25519 public key; output is ``ephemeral || nonce || ciphertext``."""
    eph = new_encryption_key(rng)
    eph_pub = public_bytes(eph)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_public))
    nonce = rng.randbytes(12)
    ct = AESGCM(_seal_key(shared, eph_pub, recipient_public)).encrypt(nonce, plaintext, aad)
    return eph_pub + nonce + ct


def unseal(private: X25519PrivateKey, blob: bytes, aad: bytes = b"") -> bytes:
    if len(blob) < 32 + 12 + 16:
        raise SealError("sealed blob too short")
    eph_pub, nonce, ct = blob[:32], blob[32:44], blob[44:]
    try:
        shared = private.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        return AESGCM(_seal_key(shared, eph_pub, public_bytes(private))).decrypt(nonce, ct, aad)
    except (InvalidTag, ValueError) as exc:
        raise SealError("cannot open sealed blob") from exc


# --------------------------------------------------------------------------
# Overlay identifiers


@dataclass(frozen=True, order=True)
class Eid:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != EID_BYTES:
            raise ValueError("an EID is exactly 16 bytes")

    def __str__(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Eid":
        return cls(bytes.fromhex(text))


def generate_eid(rng: random.Random = SECURE_RNG) -> Eid:
    return Eid(rng.randbytes(EID_BYTES))


_HOSTNAME_RE = re.compile(r"^(?=.{1,253}$)([A-Za-z0-9]([A-Za-z0-9-]{0,61}[A-Za-z0-9])?)(\.[A-Za-z0-9]([A-Za-z0-9-]{0,61}[A-Za-z0-9])?)*$")


@dataclass(frozen=True)
class Rloc:
    """Locator of an overlay edge endpoint (``host:port``)."""

    host: str
    port: int

    def __post_init__(self) -> None:
        if isinstance(self.port, bool) or not isinstance(self.port, int) or not 0 < self.port < 65536:
            raise ValueError(f"invalid port {self.port!r}")
        try:
            ipaddress.ip_address(self.host)
        except ValueError:
            if not _HOSTNAME_RE.match(self.host):
                raise ValueError(f"invalid host {self.host!r}") from None

    def __str__(self) -> str:
        if ":" in self.host:
            return f"[{self.host}]:{self.port}"
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Rloc":
        host, sep, port = text.rpartition(":")
        if not sep or not port.isdigit():
            raise ValueError(f"locator {text!r} is not host:port")
        return cls(host.strip("[]"), int(port))


# --------------------------------------------------------------------------
# Software TPM and attestation


@dataclass(frozen=True)
class LongTermIdentity:
    device_id: bytes
    endorsement_public: bytes


_IDENTITY_AAD = b"nexagon-long-term-identity"


@dataclass(frozen=True)
class AttestationRequest:
    fresh_public_key: bytes
    encrypted_identity: bytes
    counter: int
    tpm_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return pack_fields(b"attest/v1", self.fresh_public_key, self.encrypted_identity, self.counter)

    def to_bytes(self) -> bytes:
        return pack_fields(
            b"attest-req/v1",
            self.fresh_public_key,
            self.encrypted_identity,
            self.counter,
            self.tpm_signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationRequest":
        fpk, enc, counter, sig = unpack_fields(b"attest-req/v1", data)
        return cls(fpk, enc, counter, sig)

    def to_wire(self) -> dict:
        return {
            "fresh_public_key": b64e(self.fresh_public_key),
            "encrypted_identity": b64e(self.encrypted_identity),
            "counter": self.counter,
            "tpm_signature": b64e(self.tpm_signature),
        }

    @classmethod
    def from_wire(cls, body: dict) -> "AttestationRequest":
        return cls(
            b64d(body["fresh_public_key"]),
            b64d(body["encrypted_identity"]),
            int(body["counter"]),
            b64d(body["tpm_signature"]),
        )


class SoftwareTpm:
    """Emulated TPM: holds the endorsement key and a monotonic counter.

    The endorsement private key never leaves the object; callers only get
    signatures made with it.
    """

    def __init__(
        self,
        server_name: str,
        ca_trust_anchor: bytes,
        rng: random.Random = SECURE_RNG,
        device_id: bytes | None = None,
    ) -> None:
        self._rng = rng
        self._endorsement = new_signing_key(rng)
        self._device_id = device_id if device_id is not None else rng.randbytes(DEVICE_ID_BYTES)
        if len(self._device_id) != DEVICE_ID_BYTES:
            raise ValueError("device_id must be 16 bytes")
        self._counter = 0
        self._server_name = server_name
        self._trust_anchor = ca_trust_anchor
        self._lock = threading.Lock()

    @property
    def endorsement_public(self) -> bytes:
        return public_bytes(self._endorsement)

    @property
    def identity(self) -> LongTermIdentity:
        return LongTermIdentity(self._device_id, self.endorsement_public)

    @property
    def counter(self) -> int:
        return self._counter

    @property
    def provisioned_server_name(self) -> str:
        return self._server_name

    @property
    def ca_trust_anchor(self) -> bytes:
        return self._trust_anchor

    def attest(self, ca_encryption_key: bytes) -> tuple[AttestationRequest, Ed25519PrivateKey]:
        """Generate a fresh keypair and a TPM-signed request binding it to this device."""
        with self._lock:
            self._counter += 1
            counter = self._counter
            fresh = new_signing_key(self._rng)
            encrypted = seal(
                ca_encryption_key,
                self._device_id + self.endorsement_public,
                self._rng,
                aad=_IDENTITY_AAD,
            )
            unsigned = AttestationRequest(public_bytes(fresh), encrypted, counter)
            signature = self._endorsement.sign(unsigned.signed_bytes())
        return AttestationRequest(unsigned.fresh_public_key, encrypted, counter, signature), fresh

    # Persistence stands in for TPM non-volatile storage in live deployments.
    def save(self, path: str | Path) -> None:
        with self._lock:
            state = {
                "endorsement_private": b64e(_raw_private(self._endorsement)),
                "device_id": self._device_id.hex(),
                "counter": self._counter,
                "server_name": self._server_name,
                "ca_trust_anchor": self._trust_anchor.hex(),
            }
        Path(path).write_text(json.dumps(state, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, rng: random.Random = SECURE_RNG) -> "SoftwareTpm":
        state = json.loads(Path(path).read_text(encoding="utf-8"))
        tpm = cls(state["server_name"], bytes.fromhex(state["ca_trust_anchor"]), rng, bytes.fromhex(state["device_id"]))
        tpm._endorsement = Ed25519PrivateKey.from_private_bytes(b64d(state["endorsement_private"]))
        tpm._counter = int(state["counter"])
        return tpm


def tpm_create(
    server_name: str,
    ca_trust_anchor: bytes,
    rng: random.Random = SECURE_RNG,
    device_id: bytes | None = None,
) -> SoftwareTpm:
    return SoftwareTpm(server_name, ca_trust_anchor, rng, device_id)


class AttestationError(Exception):
    code = "attestation-failed"


class UnknownEndorsementKey(AttestationError):
    code = "unknown-endorsement-key"


class AttestationReplay(AttestationError):
    code = "replay"


class MalformedAttestation(AttestationError):
    code = "malformed"


@dataclass
class RegistryEntry:
    role: str = "client"
    last_counter: int = 0


class EndorsementRegistry:
    """Endorsement public keys of legitimate devices and their last counters."""

    def __init__(self, entries: dict[bytes, RegistryEntry] | None = None) -> None:
        self._entries: dict[bytes, RegistryEntry] = dict(entries or {})
        self._lock = threading.Lock()

    def register(self, endorsement_public: bytes, role: str = "client") -> None:
        if role not in ROLE_PERMISSIONS:
            raise ValueError(f"unknown role {role!r}")
        with self._lock:
            self._entries.setdefault(endorsement_public, RegistryEntry(role=role))

    def __contains__(self, endorsement_public: bytes) -> bool:
        return endorsement_public in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def role(self, endorsement_public: bytes) -> str:
        return self._entries[endorsement_public].role

    def last_counter(self, endorsement_public: bytes) -> int:
        return self._entries[endorsement_public].last_counter

    def check_and_advance(self, endorsement_public: bytes, counter: int) -> None:
        with self._lock:
            entry = self._entries.get(endorsement_public)
            if entry is None:
                raise UnknownEndorsementKey("endorsement key not registered")
            if counter <= entry.last_counter:
                raise AttestationReplay(f"counter {counter} <= {entry.last_counter}")
            entry.last_counter = counter

    def to_json(self) -> str:
        return json.dumps(
            {k.hex(): {"role": e.role, "last_counter": e.last_counter} for k, e in self._entries.items()},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EndorsementRegistry":
        raw = json.loads(text)
        return cls({bytes.fromhex(k): RegistryEntry(v.get("role", "client"), int(v.get("last_counter", 0))) for k, v in raw.items()})

    @classmethod
    def load(cls, path: str | Path) -> "EndorsementRegistry":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def open_identity(req: AttestationRequest, ca_decryption_key: X25519PrivateKey) -> LongTermIdentity:
    try:
        plain = unseal(ca_decryption_key, req.encrypted_identity, aad=_IDENTITY_AAD)
    except SealError as exc:
        raise MalformedAttestation("identity does not decrypt") from exc
    if len(plain) != DEVICE_ID_BYTES + 32:
        raise MalformedAttestation("identity has wrong length")
    return LongTermIdentity(plain[:DEVICE_ID_BYTES], plain[DEVICE_ID_BYTES:])


def verify_attestation(
    req: AttestationRequest,
    registry: EndorsementRegistry,
    ca_decryption_key: X25519PrivateKey,
    *,
    require_registered: bool = True,
) -> LongTermIdentity:
    """Check a TPM attestation and return the device identity it carries.

    The endorsement key travels inside the encrypted identity so that
    onboarding requests are unlinkable on the wire.  Passing
    ``require_registered=False`` skips the registry (an ablation used by the
    threat lab); signature, replay and decryption checks still apply to keys
    that are registered.
    """
    identity = open_identity(req, ca_decryption_key)
    if not verify_signature(identity.endorsement_public, req.tpm_signature, req.signed_bytes()):
        if identity.endorsement_public not in registry:
            raise UnknownEndorsementKey("no registered key signed this request")
        raise MalformedAttestation("bad TPM signature")
    if identity.endorsement_public in registry or require_registered:
        registry.check_and_advance(identity.endorsement_public, req.counter)
    return identity


# --------------------------------------------------------------------------
# Certificates and the CA keyring


@dataclass(frozen=True)
class PseudonymCertificate:
    """Short-lived credential. Deliberately has no subject or locator fields."""

    serial: int
    subject_public_key: bytes
    permissions: frozenset[str]
    not_before: int
    not_after: int
    ca_epoch: int
    ca_signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return pack_fields(
            b"pseudonym-cert/v1",
            self.serial,
            self.subject_public_key,
            frozenset(self.permissions),
            self.not_before,
            self.not_after,
            self.ca_epoch,
        )

    def to_bytes(self) -> bytes:
        return pack_fields(
            b"pseudonym-cert-signed/v1",
            self.serial,
            self.subject_public_key,
            frozenset(self.permissions),
            self.not_before,
            self.not_after,
            self.ca_epoch,
            self.ca_signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "PseudonymCertificate":
        serial, spk, perms, nb, na, epoch, sig = unpack_fields(b"pseudonym-cert-signed/v1", data)
        return cls(serial, spk, frozenset(perms), nb, na, epoch, sig)

    def to_b64(self) -> str:
        return b64e(self.to_bytes())

    @classmethod
    def from_b64(cls, text: str) -> "PseudonymCertificate":
        return cls.from_bytes(b64d(text))

    def debug_json(self) -> dict:
        return {
            "serial": hex128(self.serial),
            "subject_public_key": b64e(self.subject_public_key),
            "permissions": sorted(self.permissions),
            "not_before": self.not_before,
            "not_after": self.not_after,
            "ca_epoch": self.ca_epoch,
            "ca_signature": b64e(self.ca_signature),
        }


@dataclass(frozen=True)
class CaKeyAnnouncement:
    """Current epoch verification key and escrow key, endorsed by the CA root."""

    epoch: int
    signing_public: bytes
    encryption_public: bytes
    root_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return pack_fields(b"ca-epoch-key/v1", self.epoch, self.signing_public, self.encryption_public)

    def verify(self, trust_anchor: bytes) -> bool:
        return verify_signature(trust_anchor, self.root_signature, self.signed_bytes())

    def to_wire(self) -> dict:
        return {
            "epoch": self.epoch,
            "signing_public": b64e(self.signing_public),
            "encryption_public": b64e(self.encryption_public),
            "root_signature": b64e(self.root_signature),
        }

    @classmethod
    def from_wire(cls, body: dict) -> "CaKeyAnnouncement":
        return cls(
            int(body["epoch"]),
            b64d(body["signing_public"]),
            b64d(body["encryption_public"]),
            b64d(body["root_signature"]),
        )


@dataclass
class CaKeyring:
    root_key: Ed25519PrivateKey
    encryption_key: X25519PrivateKey
    epoch_key: Ed25519PrivateKey
    epoch: int = 1
    # Retired verification keys, for checking old signed records only.
    retired: dict[int, bytes] = field(default_factory=dict)

    @classmethod
    def create(cls, rng: random.Random = SECURE_RNG) -> "CaKeyring":
        return cls(new_signing_key(rng), new_encryption_key(rng), new_signing_key(rng))

    @property
    def trust_anchor(self) -> bytes:
        return public_bytes(self.root_key)

    @property
    def epoch_public(self) -> bytes:
        return public_bytes(self.epoch_key)

    @property
    def encryption_public(self) -> bytes:
        return public_bytes(self.encryption_key)

    def save_long_term(self, path: str | Path) -> None:
        """Persist the root and escrow keys; epoch keys are never persisted."""
        state = {"root": b64e(_raw_private(self.root_key)), "encryption": b64e(_raw_private(self.encryption_key))}
        Path(path).write_text(json.dumps(state), encoding="utf-8")

    @classmethod
    def load_long_term(cls, path: str | Path, rng: random.Random = SECURE_RNG) -> "CaKeyring":
        state = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            Ed25519PrivateKey.from_private_bytes(b64d(state["root"])),
            X25519PrivateKey.from_private_bytes(b64d(state["encryption"])),
            new_signing_key(rng),
        )

    def announcement(self) -> CaKeyAnnouncement:
        unsigned = CaKeyAnnouncement(self.epoch, self.epoch_public, self.encryption_public)
        return CaKeyAnnouncement(
            unsigned.epoch,
            unsigned.signing_public,
            unsigned.encryption_public,
            self.root_key.sign(unsigned.signed_bytes()),
        )


def rotate_ca_key(keyring: CaKeyring, rng: random.Random = SECURE_RNG) -> int:
    keyring.retired[keyring.epoch] = keyring.epoch_public
    keyring.epoch_key = new_signing_key(rng)
    keyring.epoch += 1
    return keyring.epoch


class CertificateError(ValueError):
    pass


def issue_pseudonym_cert(
    subject_public_key: bytes,
    permissions: Iterable[str],
    now: int,
    lifetime: int,
    keyring: CaKeyring,
    *,
    max_lifetime: int = DEFAULT_CERT_LIFETIME_MS,
    rng: random.Random = SECURE_RNG,
) -> PseudonymCertificate:
    if lifetime <= 0 or lifetime > max_lifetime:
        raise CertificateError(f"lifetime {lifetime} ms outside (0, {max_lifetime}]")
    unsigned = PseudonymCertificate(
        serial=int.from_bytes(rng.randbytes(16), "big"),
        subject_public_key=subject_public_key,
        permissions=frozenset(permissions),
        not_before=now,
        not_after=now + lifetime,
        ca_epoch=keyring.epoch,
    )
    signature = keyring.epoch_key.sign(unsigned.tbs_bytes())
    return PseudonymCertificate(
        unsigned.serial,
        unsigned.subject_public_key,
        unsigned.permissions,
        unsigned.not_before,
        unsigned.not_after,
        unsigned.ca_epoch,
        signature,
    )


def verify_cert(cert: PseudonymCertificate, epoch: int, epoch_key: bytes, now: int) -> bool:
    """Valid only under the current epoch key and inside the validity window."""
    if cert.ca_epoch != epoch:
        return False
    if not cert.not_before <= now <= cert.not_after:
        return False
    return verify_signature(epoch_key, cert.ca_signature, cert.tbs_bytes())


__all__ = [
    "AttestationError",
    "AttestationReplay",
    "AttestationRequest",
    "CaKeyAnnouncement",
    "CaKeyring",
    "CertificateError",
    "Eid",
    "EndorsementRegistry",
    "LongTermIdentity",
    "MalformedAttestation",
    "PseudonymCertificate",
    "Rloc",
    "SoftwareTpm",
    "UnknownEndorsementKey",
    "generate_eid",
    "hex128",
    "issue_pseudonym_cert",
    "parse_hex128",
    "rotate_ca_key",
    "tpm_create",
    "verify_attestation",
    "verify_cert",
]
