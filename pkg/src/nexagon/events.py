"""Geo-referenced event frames published by clients."""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, replace

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .encoding import b64d, b64e, hex128, pack_fields, parse_hex128
from .hexgrid import HexCellId
from .identity import Eid, verify_signature

ROAD_DEFECT = "road-defect"
CRASH = "crash"
HAZARD = "hazard"
CONSTRUCTION = "construction"
DUMMY = "dummy"
ATTRIBUTES = (ROAD_DEFECT, CRASH, HAZARD, CONSTRUCTION, DUMMY)

NONCE_BYTES = 16


@dataclass(frozen=True)
class EventUpdate:
    eid: Eid
    cell: HexCellId
    attribute: str
    timestamp: int
    nonce: bytes
    cert_serial: int
    payload: bytes = b""
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return pack_fields(
            b"event-update/v1",
            self.eid.value,
            self.cell.pack(),
            self.attribute,
            self.timestamp,
            self.nonce,
            self.cert_serial,
            self.payload,
        )

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + pack_fields(b"sig", self.signature)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def signed_with(self, key: Ed25519PrivateKey) -> "EventUpdate":
        return replace(self, signature=key.sign(self.signed_bytes()))

    def verify(self, subject_public_key: bytes) -> bool:
        return verify_signature(subject_public_key, self.signature, self.signed_bytes())

    def mac_with(self, psk: bytes) -> "EventUpdate":
        return replace(self, signature=hmac.new(psk, self.signed_bytes(), hashlib.sha256).digest())

    def verify_mac(self, psk: bytes) -> bool:
        expected = hmac.new(psk, self.signed_bytes(), hashlib.sha256).digest()
        return hmac.compare_digest(expected, self.signature)

    def to_wire(self) -> dict:
        body = {
            "eid": str(self.eid),
            "cell": str(self.cell),
            "attribute": self.attribute,
            "timestamp": self.timestamp,
            "nonce": self.nonce.hex(),
            "cert_serial": hex128(self.cert_serial),
            "signature": b64e(self.signature),
        }
        if self.payload:
            body["payload"] = b64e(self.payload)
        return body

    @classmethod
    def from_wire(cls, body: dict) -> "EventUpdate":
        nonce = bytes.fromhex(body["nonce"])
        if len(nonce) != NONCE_BYTES:
            raise ValueError("nonce must be 16 bytes")
        timestamp = body["timestamp"]
        if isinstance(timestamp, bool) or not isinstance(timestamp, int):
            raise ValueError("timestamp must be integer milliseconds")
        return cls(
            eid=Eid.from_hex(body["eid"]),
            cell=HexCellId.parse(body["cell"]),
            attribute=str(body["attribute"]),
            timestamp=timestamp,
            nonce=nonce,
            cert_serial=parse_hex128(body["cert_serial"]),
            payload=b64d(body["payload"]) if body.get("payload") else b"",
            signature=b64d(body["signature"]),
        )
