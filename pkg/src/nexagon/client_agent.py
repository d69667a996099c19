"""Mobile edge client: onboarding, EID rotation, cloaked publishing, dummy traffic."""

from __future__ import annotations

import hashlib
import hmac
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .ca_service import OnboardingResponse
from .events import ATTRIBUTES, DUMMY, NONCE_BYTES, EventUpdate
from .hexgrid import GeoCoordinate, HexCellId, adaptive_resolution, check_resolution, latlng_to_cell
from .identity import (
    SECURE_RNG,
    CaKeyAnnouncement,
    Eid,
    PseudonymCertificate,
    Rloc,
    SoftwareTpm,
    generate_eid,
    public_bytes,
    verify_cert,
)
from .mapping_agent import EXPIRED_CERT, STALE_EPOCH, UNKNOWN_CERT, Ack, parse_census
from .wire import ServiceError, TransportError

log = logging.getLogger(__name__)


class SpoofedAgentError(Exception):
    """The responder could not prove it holds keys chained to our trust anchor."""


class ResolutionError(LookupError):
    pass


class Transport(Protocol):
    def request(self, rloc: Rloc, op: str, body: dict, sender: Rloc | None = None) -> dict: ...


@dataclass
class ClientConfig:
    server_name: str = "ca.nexagon.test"
    eid_swap_period_ms: int = 60_000
    eid_swap_jitter: float = 0.25
    events_per_eid_max: int = 50
    dummy_rate: float = 0.0
    requested_resolution: int = 9
    k: int = 5
    # Mitigation toggles; all on in normal operation.
    eid_rotation: bool = True
    adaptive_resolution: bool = True
    mutual_auth: bool = True
    payload_bytes: int = 0
    # Tolerated lead of the CA clock when checking a freshly issued certificate.
    clock_skew_ms: int = 30_000

    def __post_init__(self) -> None:
        if self.eid_swap_period_ms <= 0:
            raise ValueError("swap period must be positive")
        if not 0.0 <= self.eid_swap_jitter < 1.0:
            raise ValueError("jitter must lie in [0, 1)")
        if self.events_per_eid_max < 1:
            raise ValueError("events_per_eid_max must be >= 1")
        if self.dummy_rate < 0:
            raise ValueError("dummy_rate must be >= 0")
        check_resolution(self.requested_resolution)


@dataclass
class Session:
    certificate: PseudonymCertificate
    key: Ed25519PrivateKey
    announcement: CaKeyAnnouncement
    ca_endpoint: Rloc
    mapping_endpoint: Rloc
    aggregation_endpoint: Rloc
    sparse_flag: bool
    requested_resolution: int
    nonce_salt: bytes
    nonce_counter: int = 0
    cert_sent: bool = False

    @property
    def epoch(self) -> int:
        return self.certificate.ca_epoch


@dataclass
class EidState:
    eid: Eid
    since: int
    next_swap_at: int
    events: int = 0
    history: list[tuple[int, Eid]] = field(default_factory=list)


class ClientAgent:
    def __init__(
        self,
        config: ClientConfig,
        tpm: SoftwareTpm,
        resolver: Mapping[str, Rloc],
        transport: Transport,
        *,
        rng: random.Random = SECURE_RNG,
        rloc: Rloc | None = None,
    ) -> None:
        self.config = config
        self.tpm = tpm
        self.resolver = resolver
        self.transport = transport
        self.rng = rng
        self.rloc = rloc
        self.session: Session | None = None
        self.eid_state: EidState | None = None
        self.current_cell: HexCellId | None = None
        self.next_dummy_at: float | None = None
        self.onboard_count = 0
        self.sent_frames: list[EventUpdate] = []

    # -- onboarding -------------------------------------------------------

    def _request(self, rloc: Rloc, op: str, body: dict) -> dict:
        return self.transport.request(rloc, op, body, self.rloc)

    def onboard(self, now: int) -> Session:
        name = self.config.server_name
        if name != self.tpm.provisioned_server_name:
            raise ResolutionError(f"{name!r} is not the server this TPM was provisioned for")
        ca = self.resolver.get(name)
        if ca is None:
            raise ResolutionError(f"no record for {name!r}")
        announcement = CaKeyAnnouncement.from_wire(self._request(ca, "CA_KEY", {}))
        if self.config.mutual_auth and not announcement.verify(self.tpm.ca_trust_anchor):
            raise SpoofedAgentError("CA key is not endorsed by the provisioned trust anchor")
        req, key = self.tpm.attest(announcement.encryption_public)
        resp = OnboardingResponse.from_wire(self._request(ca, "ONBOARD", req.to_wire()))
        cert = resp.certificate
        if self.config.mutual_auth:
            at = cert.not_before if 0 < cert.not_before - now <= self.config.clock_skew_ms else now
            if not verify_cert(cert, announcement.epoch, announcement.signing_public, at):
                raise SpoofedAgentError("issued certificate does not verify under the CA key")
            if cert.subject_public_key != public_bytes(key):
                raise SpoofedAgentError("issued certificate binds a different key")
        self.session = Session(
            certificate=cert,
            key=key,
            announcement=announcement,
            ca_endpoint=ca,
            mapping_endpoint=resp.mapping_endpoint,
            aggregation_endpoint=resp.aggregation_endpoint,
            sparse_flag=resp.sparse_flag,
            requested_resolution=min(self.config.requested_resolution, resp.requested_resolution),
            nonce_salt=resp.nonce_salt,
        )
        self.onboard_count += 1
        if self.eid_state is None:
            self._new_eid(now)
        return self.session

    # -- EIDs -------------------------------------------------------------

    def _swap_interval(self) -> int:
        j = self.config.eid_swap_jitter
        return round(self.config.eid_swap_period_ms * (1.0 + self.rng.uniform(-j, j)))

    def _new_eid(self, now: int) -> None:
        eid = generate_eid(self.rng)
        history = self.eid_state.history if self.eid_state else []
        history.append((now, eid))
        self.eid_state = EidState(eid, now, now + self._swap_interval(), 0, history)

    def eid_swap_tick(self, now: int) -> bool:
        """Swap the EID when its time or event budget is spent. Returns True on swap."""
        st = self.eid_state
        if st is None:
            self._new_eid(now)
            return True
        if not self.config.eid_rotation:
            return False
        if now >= st.next_swap_at or st.events >= self.config.events_per_eid_max:
            self._new_eid(now)
            return True
        return False

    @property
    def eid(self) -> Eid | None:
        return self.eid_state.eid if self.eid_state else None

    # -- publishing -------------------------------------------------------

    def _fresh_nonce(self, session: Session) -> bytes:
        session.nonce_counter += 1
        mac = hmac.new(session.nonce_salt, session.nonce_counter.to_bytes(8, "big"), hashlib.sha256)
        return mac.digest()[:NONCE_BYTES]

    def census_population(self, session: Session) -> Callable[[HexCellId], int]:
        cache: dict[int, dict[HexCellId, int]] = {}

        def population(cell: HexCellId) -> int:
            if cell.resolution not in cache:
                body = self._request(session.mapping_endpoint, "CENSUS", {"resolution": cell.resolution})
                cache[cell.resolution] = parse_census(body)
            return cache[cell.resolution].get(cell, 0)

        return population

    def cell_for(self, coord: GeoCoordinate, session: Session) -> HexCellId:
        res = session.requested_resolution
        if session.sparse_flag and self.config.adaptive_resolution:
            res = adaptive_resolution(coord, res, self.config.k, self.census_population(session))
        return latlng_to_cell(coord, res)

    def _ensure_session(self, now: int) -> Session:
        s = self.session
        if s is None or now > s.certificate.not_after:
            s = self.onboard(now)
        return s

    def _payload(self) -> bytes:
        return self.rng.randbytes(self.config.payload_bytes) if self.config.payload_bytes else b""

    def _build(self, session: Session, cell: HexCellId, attribute: str, now: int, payload: bytes) -> EventUpdate:
        assert self.eid_state is not None
        unsigned = EventUpdate(
            eid=self.eid_state.eid,
            cell=cell,
            attribute=attribute,
            timestamp=now,
            nonce=self._fresh_nonce(session),
            cert_serial=session.certificate.serial,
            payload=payload,
        )
        return unsigned.signed_with(session.key)

    def _send(self, attribute: str, cell_of: Callable[[Session], HexCellId], now: int) -> tuple[EventUpdate, Ack]:
        payload = self._payload()
        last_exc: Exception | None = None
        for attempt in range(2):
            session = self._ensure_session(now)
            cell = cell_of(session)
            frame = self._build(session, cell, attribute, now, payload)
            body = {"event": frame.to_wire()}
            if not session.cert_sent:
                body["cert"] = session.certificate.to_b64()
            if self.rloc is not None:
                body["sender"] = str(self.rloc)
            self.sent_frames.append(frame)
            try:
                raw = self._request(session.mapping_endpoint, "PUBLISH", body)
            except ServiceError as exc:
                last_exc = exc
                if attempt == 0 and exc.code in (STALE_EPOCH, EXPIRED_CERT):
                    self.session = None
                    continue
                if attempt == 0 and exc.code == UNKNOWN_CERT and session.cert_sent:
                    session.cert_sent = False
                    continue
                raise
            except TransportError as exc:
                last_exc = exc
                if attempt == 0:
                    continue
                raise
            session.cert_sent = True
            ack = Ack.from_wire(raw)
            if ack.nonce != frame.nonce or ack.event_digest != frame.digest():
                raise SpoofedAgentError("acknowledgment does not match the published frame")
            if self.config.mutual_auth and not ack.verify(session.announcement, now):
                raise SpoofedAgentError("acknowledgment not signed by a certified mapping service")
            self.current_cell = cell
            assert self.eid_state is not None
            self.eid_state.events += 1
            return frame, ack
        assert last_exc is not None
        raise last_exc

    def publish(self, attribute: str, coord: GeoCoordinate, now: int) -> Ack:
        if attribute not in ATTRIBUTES or attribute == DUMMY:
            raise ValueError(f"unknown observation attribute {attribute!r}")
        self.eid_swap_tick(now)
        return self._send(attribute, lambda s: self.cell_for(coord, s), now)[1]

    def dummy_tick(self, now: int) -> EventUpdate | None:
        """Emit at most one due dummy event; call repeatedly until it returns None."""
        rate = self.config.dummy_rate
        if rate <= 0 or self.current_cell is None:
            return None
        if self.next_dummy_at is None:
            self.next_dummy_at = now + self.rng.expovariate(rate) * 1000.0
        if now < self.next_dummy_at:
            return None
        self.next_dummy_at += self.rng.expovariate(rate) * 1000.0
        self.eid_swap_tick(now)
        cell = self.current_cell
        frame, _ = self._send(DUMMY, lambda s: cell, now)
        return frame
