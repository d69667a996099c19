"""Streaming per-tile aggregation with tumbling windows and an append-only lake."""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import random
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .ca_service import wall_clock_ms
from .encoding import b64d, canonical_json
from .events import DUMMY, EventUpdate
from .hexgrid import HexCellId, cell_parent
from .identity import (
    PERMISSION_FORWARD,
    SECURE_RNG,
    CaKeyAnnouncement,
    PseudonymCertificate,
    Rloc,
    verify_cert,
    verify_signature,
)
from .mapping_agent import STALE_EPOCH, forward_signed_bytes
from .wire import ServiceError

log = logging.getLogger(__name__)

LAKE_FILE = "lake.ndjson"
DROP_BAD_FORWARD = "bad-forward-signature"
DROP_LATE = "late"


@dataclass
class AggregationConfig:
    window_ms: int = 10_000
    # Windows close only once ``now`` is this far past their end, so events
    # stamped up to the mapping agent's skew bound in the past still land.
    grace_ms: int = 30_000
    lake_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.window_ms <= 0 or self.grace_ms < 0:
            raise ValueError("window must be positive and grace non-negative")


@dataclass(frozen=True)
class TileAggregate:
    cell: HexCellId
    window_start: int
    window_end: int
    counts: dict[str, int]
    distinct_eids: int
    dummy_count: int = 0
    # Per-window salted EID digests; they make roll-ups exact without
    # letting lake readers link an EID across windows.
    eid_digests: tuple[str, ...] = ()

    @property
    def event_count(self) -> int:
        return sum(self.counts.values()) + self.dummy_count

    def to_json(self) -> dict:
        return {
            "cell": str(self.cell),
            "window_start": self.window_start,
            "window_end": self.window_end,
            "counts": dict(sorted(self.counts.items())),
            "distinct_eids": self.distinct_eids,
            "dummy_count": self.dummy_count,
            "eid_digests": list(self.eid_digests),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "TileAggregate":
        return cls(
            HexCellId.parse(raw["cell"]),
            int(raw["window_start"]),
            int(raw["window_end"]),
            {k: int(v) for k, v in raw["counts"].items()},
            int(raw["distinct_eids"]),
            int(raw.get("dummy_count", 0)),
            tuple(raw.get("eid_digests", ())),
        )


@dataclass
class _TileState:
    counts: Counter = field(default_factory=Counter)
    dummy: int = 0
    eids: set[str] = field(default_factory=set)


def merge_aggregates(cell: HexCellId, window_start: int, window_end: int, parts: Iterable[TileAggregate]) -> TileAggregate:
    counts: Counter[str] = Counter()
    dummy = 0
    digests: set[str] = set()
    for p in parts:
        counts.update(p.counts)
        dummy += p.dummy_count
        digests.update(p.eid_digests)
    return TileAggregate(cell, window_start, window_end, dict(counts), len(digests), dummy, tuple(sorted(digests)))


class AggregationAgent:
    def __init__(
        self,
        config: AggregationConfig,
        *,
        rng: random.Random = SECURE_RNG,
        clock: Callable[[], int] = wall_clock_ms,
    ) -> None:
        self.config = config
        self.clock = clock
        self.trust: CaKeyAnnouncement | None = None
        self.refresh_hook: Callable[[], None] | None = None
        self._salt_secret = rng.randbytes(32)
        self._open: dict[int, dict[HexCellId, _TileState]] = {}
        self._closed_before = None  # start of the earliest still-open window, once any window closed
        self.closed: list[TileAggregate] = []
        self.drops: Counter[str] = Counter()
        self.drop_log: list[dict] = []
        self.ingested = 0
        self._forwarders: dict[int, PseudonymCertificate] = {}
        self._lock = threading.RLock()
        self.lake_path: Path | None = None
        if config.lake_dir is not None:
            Path(config.lake_dir).mkdir(parents=True, exist_ok=True)
            self.lake_path = Path(config.lake_dir) / LAKE_FILE
            self.lake_path.touch()

    def set_trust(self, announcement: CaKeyAnnouncement) -> None:
        with self._lock:
            self.trust = announcement

    def window_of(self, timestamp: int) -> int:
        return timestamp - timestamp % self.config.window_ms

    def _eid_digest(self, window_start: int, eid_hex: str) -> str:
        salt = hmac.new(self._salt_secret, str(window_start).encode(), hashlib.sha256).digest()
        return hashlib.sha256(salt + bytes.fromhex(eid_hex)).hexdigest()[:32]

    def _drop(self, reason: str, digests: list[str], now: int) -> None:
        self.drops[reason] += len(digests)
        self.drop_log.append({"at": now, "reason": reason, "events": digests})
        log.info("dropped %d event(s): %s", len(digests), reason)

    # -- ingest -----------------------------------------------------------

    def ingest(self, event: EventUpdate, now: int) -> bool:
        """Route one already-admitted event into its window. False if dropped as late."""
        start = self.window_of(event.timestamp)
        with self._lock:
            if self._closed_before is not None and start < self._closed_before:
                self._drop(DROP_LATE, [event.digest()], now)
                return False
            tile = self._open.setdefault(start, {}).setdefault(event.cell, _TileState())
            if event.attribute == DUMMY:
                tile.dummy += 1
            else:
                tile.counts[event.attribute] += 1
                tile.eids.add(self._eid_digest(start, str(event.eid)))
            self.ingested += 1
            return True

    def _check_forwarder(self, cert: PseudonymCertificate, now: int) -> None:
        if self.trust is None or cert.ca_epoch > self.trust.epoch:
            if self.refresh_hook is not None:
                self.refresh_hook()
        trust = self.trust
        if trust is None or cert.ca_epoch != trust.epoch:
            raise ServiceError(STALE_EPOCH, "forwarding certificate from another epoch")
        cached = self._forwarders.get(cert.serial)
        if cached == cert and cert.not_before <= now <= cert.not_after:
            return
        if not verify_cert(cert, trust.epoch, trust.signing_public, now) or PERMISSION_FORWARD not in cert.permissions:
            raise ValueError("forwarding certificate invalid")
        self._forwarders = {cert.serial: cert}

    def ingest_batch(self, body: dict, now: int) -> dict:
        events = [EventUpdate.from_wire(e) for e in body.get("events", [])]
        with self._lock:
            try:
                cert = PseudonymCertificate.from_b64(body["cert"])
                self._check_forwarder(cert, now)
                ok = verify_signature(cert.subject_public_key, b64d(body["signature"]), forward_signed_bytes(events))
            except ServiceError:
                raise
            except (KeyError, ValueError, TypeError):
                ok = False
            if not ok:
                self._drop(DROP_BAD_FORWARD, [e.digest() for e in events], now)
                return {"accepted": 0, "dropped": len(events)}
            accepted = sum(1 for e in events if self.ingest(e, now))
            return {"accepted": accepted, "dropped": len(events) - accepted}

    # -- windows ----------------------------------------------------------

    def _emit(self, start: int) -> list[TileAggregate]:
        tiles = self._open.pop(start)
        end = start + self.config.window_ms
        out = [
            TileAggregate(cell, start, end, dict(t.counts), len(t.eids), t.dummy, tuple(sorted(t.eids)))
            for cell, t in sorted(tiles.items())
        ]
        self.closed.extend(out)
        if self.lake_path is not None and out:
            with open(self.lake_path, "a", encoding="utf-8") as fh:
                fh.write("".join(canonical_json(a.to_json()) + "\n" for a in out))
        self._closed_before = max(self._closed_before or end, end)
        return out

    def close_window(self, now: int) -> list[TileAggregate]:
        """Close every open window whose end is at least ``grace_ms`` before ``now``."""
        with self._lock:
            due = sorted(s for s in self._open if s + self.config.window_ms + self.config.grace_ms <= now)
            out: list[TileAggregate] = []
            for start in due:
                out.extend(self._emit(start))
            return out

    def flush(self) -> list[TileAggregate]:
        with self._lock:
            out: list[TileAggregate] = []
            for start in sorted(self._open):
                out.extend(self._emit(start))
            return out

    # -- queries ----------------------------------------------------------

    def query_tiles(self, cell: HexCellId, start: int, end: int) -> list[TileAggregate]:
        """Closed aggregates for ``cell`` (finer tiles rolled up) in windows intersecting [start, end)."""
        by_window: dict[tuple[int, int], list[TileAggregate]] = {}
        with self._lock:
            for agg in self.closed:
                if agg.window_end <= start or agg.window_start >= end:
                    continue
                if agg.cell.resolution < cell.resolution or cell_parent(agg.cell, cell.resolution) != cell:
                    continue
                by_window.setdefault((agg.window_start, agg.window_end), []).append(agg)
        return [merge_aggregates(cell, ws, we, parts) for (ws, we), parts in sorted(by_window.items())]

    def represented(self) -> int:
        """Events held in closed aggregates plus open windows."""
        with self._lock:
            closed = sum(a.event_count for a in self.closed)
            open_ = sum(sum(t.counts.values()) + t.dummy for tiles in self._open.values() for t in tiles.values())
            return closed + open_

    def stats(self) -> dict:
        with self._lock:
            return {
                "ingested": self.ingested,
                "represented": self.represented(),
                "drops": dict(self.drops),
                "closed_aggregates": len(self.closed),
                "open_windows": len(self._open),
            }

    def dispatch(self, op: str, body: dict, peer: Rloc | None) -> dict:
        now = self.clock()
        if op == "INGEST":
            result = self.ingest_batch(body, now)
            self.close_window(now)
            return result
        if op == "QUERY":
            cell = HexCellId.parse(body["cell"])
            aggs = self.query_tiles(cell, int(body["from"]), int(body["to"]))
            return {"aggregates": [a.to_json() for a in aggs]}
        if op == "FLUSH":
            return {"closed": len(self.flush())}
        if op == "STATS":
            return self.stats()
        raise ServiceError("unknown-op", op)


def read_lake(path: Path) -> list[TileAggregate]:
    with open(path, encoding="utf-8") as fh:
        return [TileAggregate.from_json(json.loads(line)) for line in fh if line.strip()]
