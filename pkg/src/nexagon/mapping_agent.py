"""Geo-mapping node: publisher admission, EID mapping store, audit log, census.

Admission of a PUBLISH frame requires, in order: a known certificate valid
under the current CA epoch, a valid frame signature, a timestamp within the
skew bound, and a nonce not seen for that certificate within the replay
window.  Every frame gets exactly one audit record, accepted or not.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import queue
import random
import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .ca_service import CensusReport, wall_clock_ms
from .encoding import b64d, b64e, ndjson_lines, pack_fields
from .events import ATTRIBUTES, EventUpdate
from .hexgrid import HexCellId, cell_parent, check_resolution
from .identity import (
    PERMISSION_MAP_SERVICE,
    PERMISSION_PUBLISH,
    SECURE_RNG,
    CaKeyAnnouncement,
    Eid,
    PseudonymCertificate,
    Rloc,
    new_signing_key,
    public_bytes,
    verify_cert,
    verify_signature,
)
from .wire import ServiceError, TransportError

log = logging.getLogger(__name__)

STALE_EPOCH = "stale-epoch"
REPLAY = "replay"
BAD_SIGNATURE = "bad-signature"
UNKNOWN_CERT = "unknown-cert"
CLOCK_SKEW = "clock-skew"
EXPIRED_CERT = "expired-cert"
FORBIDDEN = "forbidden"
BAD_REQUEST = "bad-request"
REJECTION_CODES = (STALE_EPOCH, REPLAY, BAD_SIGNATURE, UNKNOWN_CERT, CLOCK_SKEW, EXPIRED_CERT, FORBIDDEN, BAD_REQUEST)

ACCEPTED = "accepted"


class Rejected(ServiceError):
    pass


@dataclass
class MappingConfig:
    staleness_ms: int = 120_000
    replay_window_ms: int = 600_000
    skew_ms: int = 30_000
    nonce_check: bool = True
    # Set only for the benchmark's pre-shared-key baseline admission path.
    psk: bytes | None = None
    census_resolution: int = 9
    k: int = 5
    attributes: tuple[str, ...] = ATTRIBUTES
    audit_path: Path | None = None


@dataclass
class MappingEntry:
    eid: Eid
    rloc: Rloc | None
    cell: HexCellId
    cert_serial: int
    last_seen: int


# --------------------------------------------------------------------------
# Audit log


GENESIS_HASH = "0" * 64


@dataclass(frozen=True)
class AuditRecord:
    sequence: int
    event_digest: str
    verdict: str
    at: int
    prev_hash: str
    record_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return pack_fields(b"audit/v1", self.sequence, self.event_digest, self.verdict, self.at, self.prev_hash)

    def record_hash(self) -> str:
        return hashlib.sha256(self.signed_bytes() + self.record_signature).hexdigest()

    def to_json(self) -> dict:
        return {
            "sequence": self.sequence,
            "event_digest": self.event_digest,
            "verdict": self.verdict,
            "at": self.at,
            "prev_hash": self.prev_hash,
            "record_signature": b64e(self.record_signature),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "AuditRecord":
        return cls(
            int(raw["sequence"]),
            raw["event_digest"],
            raw["verdict"],
            int(raw["at"]),
            raw["prev_hash"],
            b64d(raw["record_signature"]),
        )


def rejected_verdict(code: str) -> str:
    return f"rejected:{code}"


class AuditLog:
    """Append-only, hash-chained, signed log.

    ``signing_key=None`` produces an unsigned chain; that exists only so the
    threat lab can show what a forger achieves without signatures.
    """

    def __init__(self, signing_key: Ed25519PrivateKey | None, path: Path | None = None) -> None:
        self._key = signing_key
        self._records: list[AuditRecord] = []
        self._path = path
        self._lock = threading.Lock()

    @property
    def public_key(self) -> bytes | None:
        return public_bytes(self._key) if self._key is not None else None

    def append(self, event_digest: str, verdict: str, at: int) -> AuditRecord:
        with self._lock:
            prev = self._records[-1].record_hash() if self._records else GENESIS_HASH
            unsigned = AuditRecord(len(self._records), event_digest, verdict, at, prev)
            sig = self._key.sign(unsigned.signed_bytes()) if self._key is not None else b""
            record = AuditRecord(unsigned.sequence, event_digest, verdict, at, prev, sig)
            self._records.append(record)
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            return record

    def records(self) -> list[AuditRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def export_ndjson(self) -> str:
        return ndjson_lines(r.to_json() for r in self.records())


def verify_audit_chain(records: Iterable[AuditRecord], public_key: bytes | None) -> bool:
    """True iff sequence numbers are gap-free, hashes chain, and every record is signed.

    With ``public_key=None`` only the hash chain is checked.
    """
    prev = GENESIS_HASH
    for expected_seq, record in enumerate(records):
        if record.sequence != expected_seq or record.prev_hash != prev:
            return False
        if public_key is not None and not verify_signature(public_key, record.record_signature, record.signed_bytes()):
            return False
        prev = record.record_hash()
    return True


def parse_audit_ndjson(text: str) -> list[AuditRecord]:
    return [AuditRecord.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


# --------------------------------------------------------------------------
# Replay defense


class ReplayGuard:
    """Per-serial nonce sets with a sliding time window."""

    def __init__(self, window_ms: int) -> None:
        self.window_ms = window_ms
        self._seen: dict[int, OrderedDict[bytes, int]] = {}

    def check_and_record(self, serial: int, nonce: bytes, now: int) -> bool:
        """Record the nonce; return False if it was already seen in the window."""
        nonces = self._seen.setdefault(serial, OrderedDict())
        cutoff = now - self.window_ms
        while nonces:
            oldest, at = next(iter(nonces.items()))
            if at >= cutoff:
                break
            nonces.popitem(last=False)
        if nonce in nonces:
            return False
        nonces[nonce] = now
        return True

    def prune(self, now: int) -> None:
        cutoff = now - self.window_ms
        for serial in list(self._seen):
            nonces = self._seen[serial]
            while nonces and next(iter(nonces.values())) < cutoff:
                nonces.popitem(last=False)
            if not nonces:
                del self._seen[serial]


# --------------------------------------------------------------------------
# Acknowledgments


@dataclass(frozen=True)
class Ack:
    status: str
    event_digest: str
    nonce: bytes
    service_cert: PseudonymCertificate | None
    signature: bytes

    @staticmethod
    def signed_bytes_for(status: str, event_digest: str, nonce: bytes) -> bytes:
        return pack_fields(b"ack/v1", status, event_digest, nonce)

    def signed_bytes(self) -> bytes:
        return self.signed_bytes_for(self.status, self.event_digest, self.nonce)

    def to_wire(self) -> dict:
        body = {
            "status": self.status,
            "event_digest": self.event_digest,
            "nonce": self.nonce.hex(),
            "signature": b64e(self.signature),
        }
        if self.service_cert is not None:
            body["service_cert"] = self.service_cert.to_b64()
        return body

    @classmethod
    def from_wire(cls, body: dict) -> "Ack":
        cert = body.get("service_cert")
        return cls(
            body["status"],
            body["event_digest"],
            bytes.fromhex(body["nonce"]),
            PseudonymCertificate.from_b64(cert) if cert else None,
            b64d(body["signature"]),
        )

    def verify(self, announcement: CaKeyAnnouncement, now: int) -> bool:
        """Mutual-auth check: the ack comes from a CA-certified mapping service."""
        cert = self.service_cert
        if cert is None or PERMISSION_MAP_SERVICE not in cert.permissions:
            return False
        if not verify_cert(cert, announcement.epoch, announcement.signing_public, now):
            return False
        return verify_signature(cert.subject_public_key, self.signature, self.signed_bytes())


# --------------------------------------------------------------------------
# Forwarding to aggregation


def forward_signed_bytes(events: list[EventUpdate]) -> bytes:
    return pack_fields(b"forward/v1", [e.to_bytes() for e in events])


class Forwarder:
    """Delivers accepted events to the aggregation endpoint.

    ``synchronous=True`` sends each event immediately (used in simulation so
    that accounting is exact at every step); otherwise a background thread
    drains a queue in batches, waiting up to ``linger_s`` after the first
    queued event so one forwarding signature covers many events.
    """

    def __init__(
        self,
        agent: "MappingAgent",
        transport,
        rloc: Rloc,
        *,
        synchronous: bool = False,
        batch_max: int = 128,
        linger_s: float = 0.05,
    ) -> None:
        self.agent = agent
        self.transport = transport
        self.rloc = rloc
        self.synchronous = synchronous
        self.batch_max = batch_max
        self.linger_s = linger_s
        self._queue: queue.Queue[EventUpdate | None] = queue.Queue()
        self._thread: threading.Thread | None = None
        self._idle = threading.Event()
        self._idle.set()
        self.sent = 0
        if not synchronous:
            self._thread = threading.Thread(target=self._run, name="mapping-forwarder", daemon=True)
            self._thread.start()

    def submit(self, event: EventUpdate) -> None:
        if self.synchronous:
            self._deliver([event])
        else:
            self._idle.clear()
            self._queue.put(event)

    def _deliver(self, events: list[EventUpdate]) -> None:
        for attempt in range(2):
            body = self.agent.sign_forward(events)
            try:
                result = self.transport.request(self.rloc, "INGEST", body)
            except ServiceError as exc:
                if exc.code == STALE_EPOCH and attempt == 0 and self.agent.refresh_hook is not None:
                    self.agent.refresh_hook()
                    continue
                self.agent.record_forward_drop(exc.code, len(events))
                return
            except TransportError:
                if attempt == 0:
                    continue
                self.agent.record_forward_drop("transport", len(events))
                return
            self.sent += int(result.get("accepted", len(events)))
            return

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            batch = [item]
            deadline = time.monotonic() + self.linger_s
            while len(batch) < self.batch_max:
                try:
                    nxt = self._queue.get(timeout=max(0.0, deadline - time.monotonic()))
                except queue.Empty:
                    break
                if nxt is None:
                    self._deliver(batch)
                    return
                batch.append(nxt)
            self._deliver(batch)
            if self._queue.empty():
                self._idle.set()

    def flush(self, timeout: float = 10.0) -> bool:
        if self.synchronous:
            return True
        return self._idle.wait(timeout)

    def close(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            self._queue.put(None)
            self._thread.join(timeout=5)


# --------------------------------------------------------------------------
# The agent


class MappingAgent:
    def __init__(
        self,
        config: MappingConfig,
        *,
        service_key: Ed25519PrivateKey | None = None,
        audit_key: Ed25519PrivateKey | None = None,
        sign_audit: bool = True,
        rng: random.Random = SECURE_RNG,
        clock: Callable[[], int] = wall_clock_ms,
    ) -> None:
        self.config = config
        self.clock = clock
        self.service_key = service_key or new_signing_key(rng)
        audit_key = audit_key or new_signing_key(rng)
        self.audit = AuditLog(audit_key if sign_audit else None, config.audit_path)
        self.service_cert: PseudonymCertificate | None = None
        self.trust: CaKeyAnnouncement | None = None
        self.forwarder: Forwarder | None = None
        # Called when a certificate from an epoch newer than ours shows up.
        self.refresh_hook: Callable[[], None] | None = None
        self.entries: dict[Eid, MappingEntry] = {}
        self._eid_of_serial: dict[int, Eid] = {}
        self._certs: dict[int, PseudonymCertificate] = {}
        self._replay = ReplayGuard(config.replay_window_ms)
        self._lock = threading.RLock()
        self.accepted = 0
        self.rejections: Counter[str] = Counter()
        self.forward_drops: Counter[str] = Counter()

    # -- trust management -------------------------------------------------

    def set_trust(self, announcement: CaKeyAnnouncement) -> None:
        with self._lock:
            self.trust = announcement

    def set_service_cert(self, cert: PseudonymCertificate) -> None:
        with self._lock:
            self.service_cert = cert

    def _maybe_refresh(self, epoch: int) -> None:
        if self.refresh_hook is not None and (self.trust is None or epoch > self.trust.epoch):
            self.refresh_hook()

    # -- admission --------------------------------------------------------

    def _admit_cert(self, frame: EventUpdate, cert: PseudonymCertificate | None, now: int) -> PseudonymCertificate:
        if cert is not None:
            if cert.serial != frame.cert_serial:
                raise Rejected(UNKNOWN_CERT, "attached certificate does not match serial")
            if self.trust is None or cert.ca_epoch > self.trust.epoch:
                self._maybe_refresh(cert.ca_epoch)
            trust = self.trust
            if trust is None:
                raise Rejected(UNKNOWN_CERT, "no CA trust configured")
            if cert.ca_epoch != trust.epoch:
                raise Rejected(STALE_EPOCH, f"certificate epoch {cert.ca_epoch} != {trust.epoch}")
            if not verify_cert(cert, trust.epoch, trust.signing_public, now):
                if not cert.not_before <= now <= cert.not_after:
                    raise Rejected(EXPIRED_CERT)
                raise Rejected(UNKNOWN_CERT, "certificate does not verify")
            self._certs[cert.serial] = cert
            known = cert
        else:
            known = self._certs.get(frame.cert_serial)
            if known is None:
                raise Rejected(UNKNOWN_CERT)
            if self.trust is None or known.ca_epoch != self.trust.epoch:
                raise Rejected(STALE_EPOCH)
            if not known.not_before <= now <= known.not_after:
                raise Rejected(EXPIRED_CERT)
        if PERMISSION_PUBLISH not in known.permissions:
            raise Rejected(FORBIDDEN, "certificate lacks publish permission")
        return known

    def _admit(self, frame: EventUpdate, cert: PseudonymCertificate | None, now: int) -> None:
        if frame.attribute not in self.config.attributes:
            raise Rejected(BAD_REQUEST, f"unknown attribute {frame.attribute!r}")
        if self.config.psk is not None:
            if not frame.verify_mac(self.config.psk):
                raise Rejected(BAD_SIGNATURE)
        else:
            known = self._admit_cert(frame, cert, now)
            if not frame.verify(known.subject_public_key):
                raise Rejected(BAD_SIGNATURE)
        if abs(frame.timestamp - now) > self.config.skew_ms:
            raise Rejected(CLOCK_SKEW)
        if self.config.nonce_check and not self._replay.check_and_record(frame.cert_serial, frame.nonce, now):
            raise Rejected(REPLAY)

    def handle_publish(
        self,
        frame: EventUpdate,
        sender_rloc: Rloc | None,
        now: int,
        cert: PseudonymCertificate | None = None,
    ) -> Ack:
        digest = frame.digest()
        with self._lock:
            try:
                self._admit(frame, cert, now)
            except Rejected as exc:
                self.audit.append(digest, rejected_verdict(exc.code), now)
                self.rejections[exc.code] += 1
                raise
            self.audit.append(digest, ACCEPTED, now)
            self.accepted += 1
            self._upsert(frame, sender_rloc, now)
        if self.forwarder is not None:
            self.forwarder.submit(frame)
        return self._ack(digest, frame.nonce)

    def _upsert(self, frame: EventUpdate, rloc: Rloc | None, now: int) -> None:
        previous = self._eid_of_serial.get(frame.cert_serial)
        if previous is not None and previous != frame.eid:
            # The client moved to a new EID; its old mapping is no longer live.
            self.entries.pop(previous, None)
        existing = self.entries.get(frame.eid)
        if existing is not None and existing.cert_serial != frame.cert_serial:
            self._eid_of_serial.pop(existing.cert_serial, None)
        self.entries[frame.eid] = MappingEntry(frame.eid, rloc, frame.cell, frame.cert_serial, now)
        self._eid_of_serial[frame.cert_serial] = frame.eid

    def _ack(self, digest: str, nonce: bytes) -> Ack:
        signed = Ack.signed_bytes_for(ACCEPTED, digest, nonce)
        if self.config.psk is not None:
            sig = hmac.new(self.config.psk, signed, hashlib.sha256).digest()
            return Ack(ACCEPTED, digest, nonce, None, sig)
        return Ack(ACCEPTED, digest, nonce, self.service_cert, self.service_key.sign(signed))

    # -- forwarding -------------------------------------------------------

    def sign_forward(self, events: list[EventUpdate]) -> dict:
        return {
            "events": [e.to_wire() for e in events],
            "cert": self.service_cert.to_b64() if self.service_cert else "",
            "signature": b64e(self.service_key.sign(forward_signed_bytes(events))),
        }

    def record_forward_drop(self, reason: str, count: int) -> None:
        with self._lock:
            self.forward_drops[reason] += count

    # -- census and housekeeping -----------------------------------------

    def _live(self, now: int) -> list[MappingEntry]:
        cutoff = now - self.config.staleness_ms
        return [e for e in self.entries.values() if e.last_seen >= cutoff]

    def census(self, resolution: int, now: int) -> dict[HexCellId, int]:
        """Distinct live EIDs per cell, coarsened to ``resolution``.

        Entries already coarser than ``resolution`` (cloaked publishers) are
        counted under their own cell.
        """
        check_resolution(resolution)
        with self._lock:
            counts: Counter[HexCellId] = Counter()
            for entry in self._live(now):
                counts[_coarsen(entry.cell, resolution)] += 1
            return dict(counts)

    def census_push(self, now: int, resolution: int | None = None, k: int | None = None) -> CensusReport:
        res = resolution or self.config.census_resolution
        k = k or self.config.k
        with self._lock:
            counts = self.census(res, now)
            members = {}
            for entry in self._live(now):
                cell = _coarsen(entry.cell, res)
                if counts[cell] < k:
                    members[entry.cert_serial] = cell
            return CensusReport(res, counts, members)

    def expire_entries(self, now: int) -> int:
        cutoff = now - self.config.staleness_ms
        with self._lock:
            stale = [eid for eid, e in self.entries.items() if e.last_seen < cutoff]
            for eid in stale:
                entry = self.entries.pop(eid)
                if self._eid_of_serial.get(entry.cert_serial) == eid:
                    del self._eid_of_serial[entry.cert_serial]
            self._replay.prune(now)
            for serial in [s for s, c in self._certs.items() if c.not_after < now - self.config.skew_ms]:
                del self._certs[serial]
            return len(stale)

    def stats(self) -> dict:
        with self._lock:
            return {
                "accepted": self.accepted,
                "rejected": dict(self.rejections),
                "forward_drops": dict(self.forward_drops),
                "entries": len(self.entries),
                "audit_records": len(self.audit),
            }

    # -- wire -------------------------------------------------------------

    def dispatch(self, op: str, body: dict, peer: Rloc | None) -> dict:
        now = self.clock()
        if op == "PUBLISH":
            try:
                frame = EventUpdate.from_wire(body["event"])
                cert = PseudonymCertificate.from_b64(body["cert"]) if body.get("cert") else None
            except (KeyError, ValueError, TypeError) as exc:
                digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
                with self._lock:
                    self.audit.append(digest, rejected_verdict(BAD_REQUEST), now)
                    self.rejections[BAD_REQUEST] += 1
                raise Rejected(BAD_REQUEST, str(exc)) from None
            sender = Rloc.parse(body["sender"]) if body.get("sender") else peer
            return self.handle_publish(frame, sender, now, cert).to_wire()
        if op == "CENSUS":
            res = int(body.get("resolution", self.config.census_resolution))
            return {"resolution": res, "counts": {str(c): n for c, n in sorted(self.census(res, now).items())}}
        if op == "AUDIT_EXPORT":
            return {"ndjson": self.audit.export_ndjson(), "public_key": b64e(self.audit.public_key or b"")}
        if op == "STATS":
            return self.stats()
        raise ServiceError("unknown-op", op)


def _coarsen(cell: HexCellId, resolution: int) -> HexCellId:
    return cell_parent(cell, resolution) if cell.resolution >= resolution else cell


def parse_census(body: dict) -> dict[HexCellId, int]:
    return {HexCellId.parse(c): int(n) for c, n in body.get("counts", {}).items()}
