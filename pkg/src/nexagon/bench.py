"""Load tests of the publish path: pre-shared-key baseline vs. full PKI.

The services run in subprocesses; the load generator runs here as one
asyncio task per simulated client, each a closed loop with seeded
exponential think time.  Latency spans one authenticated publish as the
client sees it: from authenticating the frame (MAC or signature), through
the round trip, to accepting the acknowledgment (MAC or signature check).
"""

from __future__ import annotations

import asyncio
import csv
import hashlib
import hmac
import json
import logging
import os
import random
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .events import ATTRIBUTES, DUMMY, NONCE_BYTES, EventUpdate
from .client_agent import ClientAgent, ClientConfig
from .hexgrid import GeoCoordinate, HexCellId, latlng_to_cell
from .identity import Eid, SoftwareTpm, generate_eid, verify_signature
from .mapping_agent import ACCEPTED, Ack, parse_audit_ndjson
from .stack import TopologyConfig, load_resolver, up
from .wire import TcpTransport, encode_frame, read_frame

log = logging.getLogger(__name__)

PERCENTILES = (50, 80, 90, 95)
PAPER_MEANS_MS = {"baseline": 306.0, "extended": 384.0}
PAPER_THROUGHPUT_RPS = {"baseline": 260.0, "extended": 250.0}
PAPER_LATENCY_BAND = (10.0, 25.0)
PAPER_THROUGHPUT_BAND = (-7.0, -3.0)
ACCEPT_LATENCY_BAND = (5.0, 40.0)
ACCEPT_THROUGHPUT_BAND = (-12.0, 0.0)
EVENT_BYTES = 512


class BenchError(RuntimeError):
    pass


@dataclass
class BenchConfig:
    mode: Literal["baseline", "extended"] = "extended"
    concurrent_clients: int = 32
    duration_s: float = 60.0
    warmup_s: float = 5.0
    seed: int = 0
    think_ms: float = 100.0
    event_bytes: int = EVENT_BYTES
    bootstrap_resamples: int = 1000
    host: str = "127.0.0.1"
    base_port: int = 7600
    stack_mode: Literal["thread", "process"] = "process"

    def __post_init__(self) -> None:
        if self.mode not in ("baseline", "extended"):
            raise ValueError("mode must be baseline or extended")
        if not self.duration_s > self.warmup_s >= 0:
            raise ValueError("need duration > warmup >= 0")
        if self.concurrent_clients < 1:
            raise ValueError("need at least one client")
        if self.bootstrap_resamples < 1000:
            raise ValueError("use at least 1000 bootstrap resamples")

    def comparable_key(self) -> tuple:
        return (self.concurrent_clients, self.duration_s, self.warmup_s, self.seed, self.think_ms, self.event_bytes)


@dataclass(frozen=True)
class RequestSpec:
    """Everything in a request except its send time and authenticator."""

    eid: Eid
    cell: HexCellId
    attribute: str
    payload: bytes
    think_ms: float


def _payload_size(event_bytes: int) -> int:
    probe = EventUpdate(Eid(b"\0" * 16), latlng_to_cell(GeoCoordinate(0.0, 0.0), 9), "road-defect", 1, b"\0" * 16, 1, b"", b"\0" * 64)
    return max(0, event_bytes - len(probe.to_bytes()))


def workload(config: BenchConfig, client_index: int) -> "WorkloadStream":
    return WorkloadStream(config, client_index)


class WorkloadStream:
    """Deterministic per-client request sequence derived from the seed."""

    def __init__(self, config: BenchConfig, client_index: int) -> None:
        seed = hashlib.sha256(f"{config.seed}:{client_index}".encode()).digest()
        self.rng = random.Random(int.from_bytes(seed[:8], "big"))
        self.think_ms = config.think_ms
        self.payload_size = _payload_size(config.event_bytes)
        lat = self.rng.uniform(-50, 50)
        lon = self.rng.uniform(-170, 170)
        self.origin = GeoCoordinate(lat, lon)
        self.eid = generate_eid(self.rng)
        self.count = 0

    def next(self) -> RequestSpec:
        self.count += 1
        if self.count % 50 == 0:
            self.eid = generate_eid(self.rng)
        coord = GeoCoordinate(self.origin.lat + self.rng.uniform(-0.01, 0.01), self.origin.lon + self.rng.uniform(-0.01, 0.01))
        attribute = self.rng.choice([a for a in ATTRIBUTES if a != DUMMY])
        return RequestSpec(
            self.eid,
            latlng_to_cell(coord, 9),
            attribute,
            self.rng.randbytes(self.payload_size),
            self.rng.expovariate(1.0 / self.think_ms) if self.think_ms > 0 else 0.0,
        )


@dataclass
class _Credentials:
    cert_serial: int
    sign: object
    cert_b64: str | None
    salt: bytes
    verify_ack: object
    counter: int = 0

    def nonce(self) -> bytes:
        self.counter += 1
        return hmac.new(self.salt, self.counter.to_bytes(8, "big"), hashlib.sha256).digest()[:NONCE_BYTES]


@dataclass
class BenchReport:
    mode: str
    config: dict
    requests: int
    successes: int
    failures: dict[str, int]
    window_s: float
    mean_latency_ms: float
    mean_latency_ci: tuple[float, float]
    throughput_rps: float
    throughput_ci: tuple[float, float]
    percentiles_ms: dict[str, float]
    accepted_in_window_audit: int | None = None
    mapping_accepted_total: int | None = None
    total_successes: int | None = None
    cpu_seconds: dict[str, float] | None = None
    raw_csv: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "BenchReport":
        raw = dict(raw)
        raw["mean_latency_ci"] = tuple(raw["mean_latency_ci"])
        raw["throughput_ci"] = tuple(raw["throughput_ci"])
        return cls(**raw)


def percentile_table(latencies_ms: np.ndarray) -> dict[str, float]:
    if latencies_ms.size == 0:
        raise BenchError("no successful requests")
    return {f"p{p}": float(np.percentile(latencies_ms, p)) for p in PERCENTILES}


def bootstrap_ci(values: np.ndarray, resamples: int, rng: np.random.Generator, stat=np.mean) -> tuple[float, float]:
    """Percentile bootstrap 95% CI of ``stat``."""
    if values.size == 0:
        return (float("nan"), float("nan"))
    stats = np.empty(resamples)
    chunk = max(1, 2_000_000 // values.size)
    for lo in range(0, resamples, chunk):
        n = min(chunk, resamples - lo)
        stats[lo : lo + n] = stat(values[rng.integers(0, values.size, size=(n, values.size))], axis=1)
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return (float(lo), float(hi))


def summarize(
    rows: list[tuple[int, int, str]],
    config: BenchConfig,
    window_start_ns: int,
    window_end_ns: int,
) -> BenchReport:
    """Report from raw (send_ns, recv_ns, verdict) rows; requests sent in the window count."""
    in_window = [(s, r, v) for s, r, v in rows if window_start_ns <= s < window_end_ns]
    ok = np.array([(r - s) / 1e6 for s, r, v in in_window if v == ACCEPTED], dtype=float)
    if ok.size == 0:
        raise BenchError("zero successful requests in the measurement window")
    failures: dict[str, int] = {}
    for _, _, v in in_window:
        if v != ACCEPTED:
            failures[v] = failures.get(v, 0) + 1
    window_s = (window_end_ns - window_start_ns) / 1e9
    rng = np.random.default_rng(config.seed)
    sends = np.array([s for s, _, v in in_window if v == ACCEPTED], dtype=np.int64)
    bins = np.bincount(((sends - window_start_ns) // 1_000_000_000).astype(np.int64), minlength=int(np.ceil(window_s)))
    return BenchReport(
        mode=config.mode,
        config=asdict(config),
        requests=len(in_window),
        successes=int(ok.size),
        failures=failures,
        window_s=window_s,
        mean_latency_ms=float(ok.mean()),
        mean_latency_ci=bootstrap_ci(ok, config.bootstrap_resamples, rng),
        throughput_rps=ok.size / window_s,
        throughput_ci=bootstrap_ci(bins.astype(float), config.bootstrap_resamples, rng),
        percentiles_ms=percentile_table(ok),
    )


# --------------------------------------------------------------------------
# Running


def _credentials(config: BenchConfig, topo: TopologyConfig, index: int, psk: bytes | None) -> _Credentials:
    if psk is not None:
        seed = hashlib.sha256(f"{config.seed}:cred:{index}".encode()).digest()
        serial = int.from_bytes(seed[:16], "big")

        def sign(frame: EventUpdate) -> EventUpdate:
            return frame.mac_with(psk)

        def verify_ack(ack: Ack, frame: EventUpdate) -> bool:
            expected = hmac.new(psk, ack.signed_bytes(), hashlib.sha256).digest()
            return hmac.compare_digest(expected, ack.signature) and ack.nonce == frame.nonce

        return _Credentials(serial, sign, None, seed[16:], verify_ack)

    tpm = SoftwareTpm.load(topo.client_tpm_path(index), random.Random(config.seed * 1000 + index))
    transport = TcpTransport()
    client = ClientAgent(
        ClientConfig(server_name=topo.server_name),
        tpm,
        load_resolver(topo),
        transport,
        rng=random.Random(config.seed * 1000 + index),
    )
    session = client.onboard(int(time.time() * 1000))
    tpm.save(topo.client_tpm_path(index))
    transport.close()
    verified: dict[int, bool] = {}

    def sign(frame: EventUpdate) -> EventUpdate:
        return frame.signed_with(session.key)

    def verify_ack(ack: Ack, frame: EventUpdate) -> bool:
        cert = ack.service_cert
        if cert is None or ack.nonce != frame.nonce:
            return False
        # The service certificate is checked once per serial; the signature every time.
        if cert.serial not in verified:
            verified[cert.serial] = ack.verify(session.announcement, int(time.time() * 1000))
            return verified[cert.serial]
        return verified[cert.serial] and verify_signature(cert.subject_public_key, ack.signature, ack.signed_bytes())

    return _Credentials(session.certificate.serial, sign, session.certificate.to_b64(), session.nonce_salt, verify_ack)


async def _client_loop(
    config: BenchConfig,
    index: int,
    creds: _Credentials,
    topo: TopologyConfig,
    deadline_ns: int,
    rows: list[tuple[int, int, str]],
    bad_acks: list[int],
) -> None:
    reader, writer = await asyncio.open_connection(topo.host, topo.mapping_port)
    stream = workload(config, index)
    first = True
    try:
        while time.time_ns() < deadline_ns:
            spec = stream.next()
            await asyncio.sleep(spec.think_ms / 1000.0)
            if time.time_ns() >= deadline_ns:
                break
            # One request spans authenticating the frame, the round trip and
            # authenticating the acknowledgment, as a client experiences it.
            send_ns = time.time_ns()
            frame = creds.sign(
                EventUpdate(spec.eid, spec.cell, spec.attribute, send_ns // 1_000_000, creds.nonce(), creds.cert_serial, spec.payload)
            )
            body = {"event": frame.to_wire()}
            if first and creds.cert_b64:
                body["cert"] = creds.cert_b64
            writer.write(encode_frame({"op": "PUBLISH", "body": body}))
            response = await read_frame(reader)
            if response.get("ok"):
                verdict = ACCEPTED
                first = False
                if not creds.verify_ack(Ack.from_wire(response["body"]), frame):
                    bad_acks.append(index)
            else:
                verdict = response.get("error", {}).get("code", "error")
            rows.append((send_ns, time.time_ns(), verdict))
    finally:
        writer.close()


def _cpu_seconds(pid: int) -> float | None:
    try:
        parts = Path(f"/proc/{pid}/stat").read_text().rsplit(")", 1)[1].split()
    except OSError:
        return None
    ticks = os.sysconf("SC_CLK_TCK")
    return (int(parts[11]) + int(parts[12])) / ticks


def run_bench(config: BenchConfig, out_dir: Path | None = None) -> BenchReport:
    state = Path(tempfile.mkdtemp(prefix=f"nexagon-bench-{config.mode}-"))
    psk = hashlib.sha256(f"bench-psk:{config.seed}".encode()).digest() if config.mode == "baseline" else None
    topo = TopologyConfig(
        host=config.host,
        ca_port=config.base_port,
        mapping_port=config.base_port + 1,
        aggregation_port=config.base_port + 2,
        state_dir=state,
        clients=config.concurrent_clients if config.mode == "extended" else 0,
        rotation_period_s=24 * 3600.0,
        cert_lifetime_s=4 * 3600.0,
        psk_hex=psk.hex() if psk else None,
        mode=config.stack_mode,
        seed=config.seed,
    )
    handle = up(topo)
    try:
        creds = [_credentials(config, topo, i, psk) for i in range(config.concurrent_clients)]
        rows: list[tuple[int, int, str]] = []
        bad_acks: list[int] = []
        cpu_before = {name: _cpu_seconds(p.pid) for name, p in handle.processes}
        start_ns = time.time_ns()
        deadline_ns = start_ns + int(config.duration_s * 1e9)

        async def main() -> None:
            await asyncio.gather(
                *(_client_loop(config, i, creds[i], topo, deadline_ns, rows, bad_acks) for i in range(config.concurrent_clients))
            )

        asyncio.run(main())
        cpu_after = {name: _cpu_seconds(p.pid) for name, p in handle.processes}
        window_start_ns = start_ns + int(config.warmup_s * 1e9)
        report = summarize(rows, config, window_start_ns, deadline_ns)
        if bad_acks:
            raise BenchError(f"{len(bad_acks)} acknowledgment(s) failed verification")
        transport = TcpTransport()
        try:
            stats = transport.request(topo.mapping_rloc, "STATS", {})
            audit = parse_audit_ndjson(transport.request(topo.mapping_rloc, "AUDIT_EXPORT", {})["ndjson"])
        finally:
            transport.close()
        lo_ms, hi_ms = window_start_ns // 1_000_000, deadline_ns // 1_000_000
        report.accepted_in_window_audit = sum(1 for r in audit if r.verdict == ACCEPTED and lo_ms <= r.at < hi_ms)
        report.mapping_accepted_total = int(stats["accepted"])
        report.total_successes = sum(1 for _, _, v in rows if v == ACCEPTED)
        if all(v is not None for v in cpu_before.values()) and cpu_before:
            report.cpu_seconds = {n: cpu_after[n] - cpu_before[n] for n in cpu_before if cpu_after.get(n) is not None}
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            raw = out_dir / f"latency-{config.mode}.csv"
            with open(raw, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["send_ns", "recv_ns", "verdict"])
                w.writerows(sorted(rows))
            report.raw_csv = raw.name
            meta = {"window_start_ns": window_start_ns, "window_end_ns": deadline_ns}
            (out_dir / f"bench-{config.mode}.json").write_text(
                json.dumps({**report.to_json(), **meta}, indent=2), encoding="utf-8"
            )
        return report
    finally:
        handle.down()
        shutil.rmtree(state, ignore_errors=True)


def load_report(path: Path) -> BenchReport:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    raw.pop("window_start_ns", None)
    raw.pop("window_end_ns", None)
    return BenchReport.from_json(raw)


# --------------------------------------------------------------------------
# Comparison


@dataclass(frozen=True)
class OverheadSummary:
    latency_overhead_pct: float
    throughput_delta_pct: float
    within_paper_latency_band: bool
    within_paper_throughput_band: bool
    within_acceptance_latency: bool
    within_acceptance_throughput: bool
    percentile_dominance: bool
    percentiles_monotone: bool

    def to_json(self) -> dict:
        return asdict(self)


def overhead_pct(base: float, ext: float) -> float:
    return (ext - base) / base * 100.0


def _monotone(p: dict[str, float]) -> bool:
    vals = [p[f"p{q}"] for q in PERCENTILES]
    return all(a <= b for a, b in zip(vals, vals[1:]))


def compare(baseline: BenchReport, extended: BenchReport) -> OverheadSummary:
    if baseline.mode != "baseline" or extended.mode != "extended":
        raise ValueError("compare() expects a baseline report and an extended report")
    keys = ("concurrent_clients", "duration_s", "warmup_s", "seed", "think_ms", "event_bytes")
    mismatched = [k for k in keys if baseline.config.get(k) != extended.config.get(k)]
    if mismatched:
        raise ValueError(f"reports come from different configurations: {mismatched}")
    lat = overhead_pct(baseline.mean_latency_ms, extended.mean_latency_ms)
    thr = overhead_pct(baseline.throughput_rps, extended.throughput_rps)
    dominance = all(extended.percentiles_ms[f"p{q}"] >= baseline.percentiles_ms[f"p{q}"] for q in PERCENTILES)
    return OverheadSummary(
        latency_overhead_pct=lat,
        throughput_delta_pct=thr,
        within_paper_latency_band=PAPER_LATENCY_BAND[0] <= lat <= PAPER_LATENCY_BAND[1],
        within_paper_throughput_band=PAPER_THROUGHPUT_BAND[0] <= thr <= PAPER_THROUGHPUT_BAND[1],
        within_acceptance_latency=ACCEPT_LATENCY_BAND[0] <= lat <= ACCEPT_LATENCY_BAND[1],
        within_acceptance_throughput=ACCEPT_THROUGHPUT_BAND[0] <= thr <= ACCEPT_THROUGHPUT_BAND[1],
        percentile_dominance=dominance,
        percentiles_monotone=_monotone(baseline.percentiles_ms) and _monotone(extended.percentiles_ms),
    )
