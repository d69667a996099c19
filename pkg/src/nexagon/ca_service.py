"""Authentication node: onboarding, pseudonym issuance, epochs, sparse sampling."""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .encoding import b64d, b64e, hex128, parse_hex128
from .hexgrid import HexCellId, check_resolution
from .identity import (
    DEFAULT_CERT_LIFETIME_MS,
    DEFAULT_ROTATION_PERIOD_MS,
    ROLE_PERMISSIONS,
    SECURE_RNG,
    AttestationError,
    AttestationRequest,
    CaKeyAnnouncement,
    CaKeyring,
    EndorsementRegistry,
    LongTermIdentity,
    PseudonymCertificate,
    Rloc,
    issue_pseudonym_cert,
    open_identity,
    rotate_ca_key,
    verify_attestation,
)
from .wire import ServiceError

log = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_RESOLUTION = 9


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass
class CaConfig:
    rotation_period_ms: int = DEFAULT_ROTATION_PERIOD_MS
    cert_lifetime_ms: int = DEFAULT_CERT_LIFETIME_MS
    max_cert_lifetime_ms: int = DEFAULT_CERT_LIFETIME_MS
    k: int = DEFAULT_K
    default_resolution: int = DEFAULT_RESOLUTION
    # False only in the threat lab's attestation ablation.
    require_registered: bool = True
    escrow_path: Path | None = None

    def __post_init__(self) -> None:
        check_resolution(self.default_resolution)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.cert_lifetime_ms <= self.max_cert_lifetime_ms:
            raise ValueError("cert lifetime must be positive and <= the maximum")
        if self.rotation_period_ms <= 0:
            raise ValueError("rotation period must be positive")


@dataclass(frozen=True)
class OnboardingResponse:
    certificate: PseudonymCertificate
    mapping_endpoint: Rloc
    aggregation_endpoint: Rloc
    requested_resolution: int
    sparse_flag: bool
    epoch: int
    nonce_salt: bytes

    def to_wire(self) -> dict:
        return {
            "certificate": self.certificate.to_b64(),
            "mapping_endpoint": str(self.mapping_endpoint),
            "aggregation_endpoint": str(self.aggregation_endpoint),
            "requested_resolution": self.requested_resolution,
            "sparse_flag": self.sparse_flag,
            "epoch": self.epoch,
            "nonce_salt": self.nonce_salt.hex(),
        }

    @classmethod
    def from_wire(cls, body: dict) -> "OnboardingResponse":
        return cls(
            PseudonymCertificate.from_b64(body["certificate"]),
            Rloc.parse(body["mapping_endpoint"]),
            Rloc.parse(body["aggregation_endpoint"]),
            check_resolution(int(body["requested_resolution"])),
            bool(body["sparse_flag"]),
            int(body["epoch"]),
            bytes.fromhex(body["nonce_salt"]),
        )


@dataclass(frozen=True)
class CensusReport:
    """Per-cell active-client counts pushed by a mapping agent.

    ``members`` lists only certificate serials sitting in cells below the
    k threshold, each with its (coarse) cell, so the CA can flag them without
    seeing EIDs or trajectories.
    """

    resolution: int
    counts: dict[HexCellId, int]
    members: dict[int, HexCellId] = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {
            "resolution": self.resolution,
            "counts": {str(c): n for c, n in sorted(self.counts.items())},
            "members": {hex128(s): str(c) for s, c in sorted(self.members.items())},
        }

    @classmethod
    def from_wire(cls, body: dict) -> "CensusReport":
        return cls(
            int(body["resolution"]),
            {HexCellId.parse(c): int(n) for c, n in body.get("counts", {}).items()},
            {parse_hex128(s): HexCellId.parse(c) for s, c in body.get("members", {}).items()},
        )


@dataclass(frozen=True)
class EscrowRecord:
    serial: int
    encrypted_identity: bytes
    issued_at: int
    epoch: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "serial": hex128(self.serial),
                "encrypted_identity": b64e(self.encrypted_identity),
                "issued_at": self.issued_at,
                "epoch": self.epoch,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "EscrowRecord":
        raw = json.loads(line)
        return cls(parse_hex128(raw["serial"]), b64d(raw["encrypted_identity"]), raw["issued_at"], raw["epoch"])


@dataclass
class CaState:
    keyring: CaKeyring
    registry: EndorsementRegistry
    config: CaConfig
    escrow: list[EscrowRecord] = field(default_factory=list)
    sparse_sample: frozenset[int] = frozenset()
    last_census: CensusReport | None = None
    last_rotation_at: int | None = None

    @property
    def epoch(self) -> int:
        return self.keyring.epoch


class CertificateAuthority:
    """Root CA of the trusted management plane.

    All state mutations happen under one lock, so a rotation either precedes
    or follows any issuance in full.
    """

    def __init__(
        self,
        config: CaConfig,
        registry: EndorsementRegistry,
        mapping_endpoint: Rloc,
        aggregation_endpoint: Rloc,
        *,
        rng: random.Random = SECURE_RNG,
        keyring: CaKeyring | None = None,
        clock: Callable[[], int] = wall_clock_ms,
    ) -> None:
        self.state = CaState(keyring or CaKeyring.create(rng), registry, config)
        self.mapping_endpoint = mapping_endpoint
        self.aggregation_endpoint = aggregation_endpoint
        self.clock = clock
        self._rng = rng
        self._lock = threading.RLock()
        self._tag_secret = rng.randbytes(32)
        self._serial_tags: dict[int, bytes] = {}
        self._flagged_tags: frozenset[bytes] = frozenset()
        self._escrow_by_serial: dict[int, EscrowRecord] = {}
        # Operator-facing logs; never sent to clients.
        self.denials: list[tuple[int, str]] = []
        self.escrow_access_log: list[tuple[int, str]] = []

    @property
    def trust_anchor(self) -> bytes:
        return self.state.keyring.trust_anchor

    @property
    def epoch(self) -> int:
        return self.state.epoch

    def _device_tag(self, device_id: bytes) -> bytes:
        return hmac.new(self._tag_secret, device_id, hashlib.sha256).digest()

    def handle_onboard(self, req: AttestationRequest, now: int) -> OnboardingResponse:
        st = self.state
        with self._lock:
            try:
                identity = _verify(req, st)
            except AttestationError as exc:
                self.denials.append((now, exc.code))
                log.info("onboarding denied (%s)", exc.code)
                raise ServiceError("auth-denied", "authentication denied") from None
            role = st.registry.role(identity.endorsement_public) if identity.endorsement_public in st.registry else "client"
            cert = issue_pseudonym_cert(
                req.fresh_public_key,
                ROLE_PERMISSIONS[role],
                now,
                st.config.cert_lifetime_ms,
                st.keyring,
                max_lifetime=st.config.max_cert_lifetime_ms,
                rng=self._rng,
            )
            record = EscrowRecord(cert.serial, req.encrypted_identity, now, cert.ca_epoch)
            st.escrow.append(record)
            self._escrow_by_serial[cert.serial] = record
            if st.config.escrow_path is not None:
                with open(st.config.escrow_path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")
            tag = self._device_tag(identity.device_id)
            self._serial_tags[cert.serial] = tag
            sparse = role == "client" and tag in self._flagged_tags
            return OnboardingResponse(
                certificate=cert,
                mapping_endpoint=self.mapping_endpoint,
                aggregation_endpoint=self.aggregation_endpoint,
                requested_resolution=st.config.default_resolution,
                sparse_flag=sparse,
                epoch=cert.ca_epoch,
                nonce_salt=self._rng.randbytes(16),
            )

    def rotation_tick(self, census: CensusReport | None, now: int) -> int:
        """Rotate the epoch key and re-sample clients at risk of sitting in sparse cells."""
        st = self.state
        with self._lock:
            epoch = rotate_ca_key(st.keyring, self._rng)
            sample: set[int] = set()
            if census is not None:
                for serial, cell in census.members.items():
                    if census.counts.get(cell, 0) < st.config.k:
                        sample.add(serial)
            st.sparse_sample = frozenset(sample)
            st.last_census = census
            st.last_rotation_at = now
            self._flagged_tags = frozenset(self._serial_tags[s] for s in sample if s in self._serial_tags)
            log.info("rotated to epoch %d; %d serial(s) flagged sparse", epoch, len(sample))
            return epoch

    def maybe_rotate(self, now: int) -> int | None:
        st = self.state
        with self._lock:
            if st.last_rotation_at is None:
                st.last_rotation_at = now
                return None
            if now - st.last_rotation_at < st.config.rotation_period_ms:
                return None
            return self.rotation_tick(st.last_census, now)

    def accept_census(self, census: CensusReport) -> None:
        with self._lock:
            self.state.last_census = census

    def publish_ca_key(self) -> CaKeyAnnouncement:
        with self._lock:
            return self.state.keyring.announcement()

    def open_escrow(self, serial: int, reason: str, now: int | None = None) -> LongTermIdentity:
        """Recover the identity behind a serial. Every call is logged."""
        with self._lock:
            self.escrow_access_log.append((self.clock() if now is None else now, f"{hex128(serial)}:{reason}"))
            record = self._escrow_by_serial[serial]
            return open_identity(
                AttestationRequest(b"", record.encrypted_identity, 0), self.state.keyring.encryption_key
            )

    def dispatch(self, op: str, body: dict, peer: Rloc | None) -> dict:
        if op == "ONBOARD":
            try:
                req = AttestationRequest.from_wire(body)
            except (KeyError, ValueError, TypeError):
                raise ServiceError("auth-denied", "authentication denied") from None
            return self.handle_onboard(req, self.clock()).to_wire()
        if op == "CA_KEY":
            return self.publish_ca_key().to_wire()
        if op == "CENSUS_PUSH":
            self.accept_census(CensusReport.from_wire(body))
            return {"stored": True}
        raise ServiceError("unknown-op", op)


def _verify(req: AttestationRequest, st: CaState) -> LongTermIdentity:
    return verify_attestation(
        req,
        st.registry,
        st.keyring.encryption_key,
        require_registered=st.config.require_registered,
    )


class RotationScheduler:
    """Background thread calling :meth:`CertificateAuthority.maybe_rotate`."""

    def __init__(self, ca: CertificateAuthority, poll_s: float = 1.0) -> None:
        self.ca = ca
        self.poll_s = poll_s
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="ca-rotation", daemon=True)

    def _run(self) -> None:
        while not self._stop.wait(self.poll_s):
            self.ca.maybe_rotate(self.ca.clock())

    def start(self) -> "RotationScheduler":
        self.ca.maybe_rotate(self.ca.clock())
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=5)
