"""Wiring of CA, mapping and aggregation services.

:class:`LocalStack` runs everything in one process on a simulated clock and
an in-process network; the threat lab and most tests use it.  The live
half of this module provisions a state directory and runs the three
services over TCP, either as threads or as subprocesses.
"""

from __future__ import annotations

import json
import logging
import os
import random
import signal
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

from .aggregation_agent import AggregationAgent, AggregationConfig
from .ca_service import CaConfig, CertificateAuthority, OnboardingResponse, RotationScheduler, wall_clock_ms
from .client_agent import ClientAgent, ClientConfig
from .identity import (
    SECURE_RNG,
    CaKeyAnnouncement,
    CaKeyring,
    EndorsementRegistry,
    Rloc,
    SoftwareTpm,
    tpm_create,
)
from .mapping_agent import Forwarder, MappingAgent, MappingConfig
from .wire import BindError, LocalNetwork, ServiceError, ServiceServer, TcpTransport, TransportError, ping

log = logging.getLogger(__name__)

DEFAULT_SERVER_NAME = "ca.nexagon.test"


class StackError(RuntimeError):
    pass


class SimClock:
    """Monotone millisecond clock advanced explicitly by the simulation."""

    def __init__(self, start_ms: int) -> None:
        self.now = start_ms

    def __call__(self) -> int:
        return self.now

    def set(self, now: int) -> None:
        if now < self.now:
            raise ValueError("simulated time cannot go backwards")
        self.now = now

    def advance(self, delta_ms: int) -> int:
        self.set(self.now + delta_ms)
        return self.now


def refresh_service_identity(
    request: Callable[[Rloc, str, dict], dict],
    ca_rloc: Rloc,
    tpm: SoftwareTpm,
    mapping: MappingAgent | None,
    aggregation: AggregationAgent | None,
    now: int,
    renew_before_ms: int = 60_000,
) -> CaKeyAnnouncement:
    """Fetch the CA key, install it as trust, and renew the mapping service certificate if needed."""
    ann = CaKeyAnnouncement.from_wire(request(ca_rloc, "CA_KEY", {}))
    if not ann.verify(tpm.ca_trust_anchor):
        raise StackError("CA key announcement not endorsed by the trust anchor")
    if aggregation is not None:
        aggregation.set_trust(ann)
    if mapping is not None:
        mapping.set_trust(ann)
        cert = mapping.service_cert
        if cert is None or cert.ca_epoch != ann.epoch or cert.not_after - now < renew_before_ms:
            req, key = tpm.attest(ann.encryption_public)
            resp = OnboardingResponse.from_wire(request(ca_rloc, "ONBOARD", req.to_wire()))
            mapping.service_key = key
            mapping.set_service_cert(resp.certificate)
    return ann


# --------------------------------------------------------------------------
# In-process simulation stack


@dataclass
class StackConfig:
    ca: CaConfig = field(default_factory=CaConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    server_name: str = DEFAULT_SERVER_NAME
    ca_rloc: Rloc = Rloc("10.0.0.1", 4000)
    mapping_rloc: Rloc = Rloc("10.0.0.2", 4001)
    aggregation_rloc: Rloc = Rloc("10.0.0.3", 4002)
    sign_audit: bool = True
    start_ms: int = 1_700_000_000_000


class LocalStack:
    def __init__(self, config: StackConfig | None = None, rng: random.Random | None = None) -> None:
        self.config = config = config or StackConfig()
        self.rng = rng if rng is not None else random.Random(0)
        self.clock = SimClock(config.start_ms)
        self.net = LocalNetwork()
        self.registry = EndorsementRegistry()
        self.ca = CertificateAuthority(
            config.ca, self.registry, config.mapping_rloc, config.aggregation_rloc, rng=self.rng, clock=self.clock
        )
        self.mapping = MappingAgent(config.mapping, rng=self.rng, clock=self.clock, sign_audit=config.sign_audit)
        self.aggregation = AggregationAgent(config.aggregation, rng=self.rng, clock=self.clock)
        self.net.bind(config.ca_rloc, self.ca)
        self.net.bind(config.mapping_rloc, self.mapping)
        self.net.bind(config.aggregation_rloc, self.aggregation)
        self.resolver = {config.server_name: config.ca_rloc}
        self.mapping_tpm = tpm_create(config.server_name, self.ca.trust_anchor, self.rng)
        self.registry.register(self.mapping_tpm.endorsement_public, "mapping")
        self.refresh_trust()
        self.mapping.forwarder = Forwarder(self.mapping, self.net, config.aggregation_rloc, synchronous=True)
        self.mapping.refresh_hook = self.refresh_trust
        self.aggregation.refresh_hook = self.refresh_trust
        self.ca.maybe_rotate(self.clock())
        self._client_seq = 0

    def refresh_trust(self) -> CaKeyAnnouncement:
        return refresh_service_identity(
            self.net.request, self.config.ca_rloc, self.mapping_tpm, self.mapping, self.aggregation, self.clock()
        )

    def new_client(
        self,
        config: ClientConfig | None = None,
        *,
        rng: random.Random | None = None,
        register: bool = True,
        device_id: bytes | None = None,
    ) -> ClientAgent:
        rng = rng if rng is not None else random.Random(self.rng.getrandbits(64))
        tpm = tpm_create(self.config.server_name, self.ca.trust_anchor, rng, device_id)
        if register:
            self.registry.register(tpm.endorsement_public, "client")
        self._client_seq += 1
        n = self._client_seq
        rloc = Rloc(f"10.{1 + n // 65536}.{(n // 256) % 256}.{n % 256}", 5000)
        return ClientAgent(config or ClientConfig(server_name=self.config.server_name), tpm, self.resolver, self.net, rng=rng, rloc=rloc)

    def push_census(self, now: int) -> None:
        report = self.mapping.census_push(now, self.config.ca.default_resolution, self.config.ca.k)
        self.net.request(self.config.ca_rloc, "CENSUS_PUSH", report.to_wire(), self.config.mapping_rloc)

    def rotate(self, now: int | None = None) -> int:
        """Census push, CA key rotation with sparse sampling, and trust refresh."""
        if now is not None:
            self.clock.set(now)
        now = self.clock()
        self.push_census(now)
        epoch = self.ca.rotation_tick(self.ca.state.last_census, now)
        self.refresh_trust()
        return epoch

    def tick(self, now: int) -> None:
        """Housekeeping at simulated time ``now``."""
        self.clock.set(now)
        self.mapping.expire_entries(now)
        self.aggregation.close_window(now)
        last = self.ca.state.last_rotation_at
        if last is not None and now - last >= self.config.ca.rotation_period_ms:
            self.rotate(now)

    def finish(self) -> None:
        self.aggregation.flush()


# --------------------------------------------------------------------------
# Live deployment


@dataclass
class TopologyConfig:
    host: str = "127.0.0.1"
    ca_port: int = 7400
    mapping_port: int = 7401
    aggregation_port: int = 7402
    state_dir: Path = Path("nexagon-state")
    server_name: str = DEFAULT_SERVER_NAME
    clients: int = 0
    rotation_period_s: float = 1800.0
    cert_lifetime_s: float = 600.0
    k: int = 5
    default_resolution: int = 9
    staleness_s: float = 120.0
    replay_window_s: float = 600.0
    window_s: float = 10.0
    psk_hex: str | None = None
    mode: str = "thread"
    readiness_timeout_s: float = 15.0
    seed: int | None = None
    # Optional overrides of the default locations inside state_dir.
    registry: str | None = None
    lake: str | None = None
    ca_host: str | None = None
    mapping_host: str | None = None
    aggregation_host: str | None = None

    def __post_init__(self) -> None:
        self.state_dir = Path(self.state_dir)
        if self.mode not in ("thread", "process"):
            raise ValueError("mode must be 'thread' or 'process'")
        rlocs = {str(self.ca_rloc), str(self.mapping_rloc), str(self.aggregation_rloc)}
        if len(rlocs) != 3:
            raise ValueError("service addresses must be distinct")

    @property
    def ca_rloc(self) -> Rloc:
        return Rloc(self.ca_host or self.host, self.ca_port)

    @property
    def mapping_rloc(self) -> Rloc:
        return Rloc(self.mapping_host or self.host, self.mapping_port)

    @property
    def aggregation_rloc(self) -> Rloc:
        return Rloc(self.aggregation_host or self.host, self.aggregation_port)

    @property
    def lake_dir(self) -> Path:
        return Path(self.lake) if self.lake else self.state_dir / "lake"

    @property
    def audit_path(self) -> Path:
        return self.state_dir / "audit.ndjson"

    @property
    def registry_path(self) -> Path:
        return Path(self.registry) if self.registry else self.state_dir / "registry.json"

    def client_tpm_path(self, index: int) -> Path:
        return self.state_dir / "clients" / f"tpm-{index:04d}.json"

    def to_json(self) -> dict:
        raw = asdict(self)
        raw["state_dir"] = str(self.state_dir)
        return raw

    @classmethod
    def from_mapping(cls, raw: dict) -> "TopologyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown topology keys: {sorted(unknown)}")
        return cls(**raw)

    def ca_config(self) -> CaConfig:
        lifetime = int(self.cert_lifetime_s * 1000)
        return CaConfig(
            rotation_period_ms=int(self.rotation_period_s * 1000),
            cert_lifetime_ms=lifetime,
            max_cert_lifetime_ms=lifetime,
            k=self.k,
            default_resolution=self.default_resolution,
            escrow_path=self.state_dir / "escrow.ndjson",
        )

    def mapping_config(self) -> MappingConfig:
        return MappingConfig(
            staleness_ms=int(self.staleness_s * 1000),
            replay_window_ms=int(self.replay_window_s * 1000),
            psk=bytes.fromhex(self.psk_hex) if self.psk_hex else None,
            census_resolution=self.default_resolution,
            k=self.k,
            audit_path=self.audit_path,
        )

    def aggregation_config(self) -> AggregationConfig:
        return AggregationConfig(window_ms=int(self.window_s * 1000), lake_dir=self.lake_dir)


def _rng(topo: TopologyConfig) -> random.Random:
    return random.Random(topo.seed) if topo.seed is not None else SECURE_RNG


def provision(topo: TopologyConfig) -> None:
    """Create CA long-term keys, the mapping service TPM and ``topo.clients`` client TPMs.

    Existing material is kept, so provisioning is idempotent.
    """
    rng = _rng(topo)
    sd = topo.state_dir
    (sd / "clients").mkdir(parents=True, exist_ok=True)
    keys = sd / "ca_keys.json"
    if keys.exists():
        keyring = CaKeyring.load_long_term(keys, rng)
    else:
        keyring = CaKeyring.create(rng)
        keyring.save_long_term(keys)
    (sd / "trust_anchor.hex").write_text(keyring.trust_anchor.hex(), encoding="utf-8")
    registry = EndorsementRegistry.load(topo.registry_path) if topo.registry_path.exists() else EndorsementRegistry()
    mapping_tpm_path = sd / "mapping_tpm.json"
    if not mapping_tpm_path.exists():
        tpm = tpm_create(topo.server_name, keyring.trust_anchor, rng)
        tpm.save(mapping_tpm_path)
        registry.register(tpm.endorsement_public, "mapping")
    for i in range(topo.clients):
        path = topo.client_tpm_path(i)
        if not path.exists():
            tpm = tpm_create(topo.server_name, keyring.trust_anchor, rng)
            tpm.save(path)
            registry.register(tpm.endorsement_public, "client")
    registry.save(topo.registry_path)
    (sd / "resolver.json").write_text(json.dumps({topo.server_name: str(topo.ca_rloc)}), encoding="utf-8")


def load_resolver(topo: TopologyConfig) -> dict[str, Rloc]:
    raw = json.loads((topo.state_dir / "resolver.json").read_text(encoding="utf-8"))
    return {name: Rloc.parse(addr) for name, addr in raw.items()}


class _Periodic:
    def __init__(self, name: str, period_s: float, fn: Callable[[], None]) -> None:
        self.period_s = period_s
        self.fn = fn
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)

    def _run(self) -> None:
        while not self._stop.wait(self.period_s):
            try:
                self.fn()
            except (ServiceError, TransportError, StackError) as exc:
                log.warning("%s: %s", self._thread.name, exc)

    def start(self) -> "_Periodic":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=5)


class CaNode:
    name = "ca"

    def __init__(self, topo: TopologyConfig, listen: Rloc | None = None) -> None:
        rng = _rng(topo)
        self.topo = topo
        keyring = CaKeyring.load_long_term(topo.state_dir / "ca_keys.json", rng)
        self.registry = EndorsementRegistry.load(topo.registry_path)
        self.ca = CertificateAuthority(
            topo.ca_config(), self.registry, topo.mapping_rloc, topo.aggregation_rloc, rng=rng, keyring=keyring
        )
        self.server = ServiceServer(self.name, self.ca, listen or topo.ca_rloc)
        self.scheduler = RotationScheduler(self.ca, poll_s=min(1.0, topo.rotation_period_s / 4))

    def start(self) -> "CaNode":
        self.server.start()
        self.scheduler.start()
        return self

    def stop(self) -> None:
        self.scheduler.stop()
        self.server.stop()
        self.registry.save(self.topo.registry_path)


class MappingNode:
    name = "mapping"

    def __init__(self, topo: TopologyConfig, listen: Rloc | None = None) -> None:
        self.topo = topo
        rng = _rng(topo)
        self.agent = MappingAgent(topo.mapping_config(), rng=rng)
        self.tpm_path = topo.state_dir / "mapping_tpm.json"
        self.tpm = SoftwareTpm.load(self.tpm_path, rng)
        self.transport = TcpTransport()
        self.server = ServiceServer(self.name, self.agent, listen or topo.mapping_rloc)
        self._refresh_lock = threading.Lock()
        self._ticks = 0
        self.housekeeping = _Periodic("mapping-housekeeping", 1.0, self._housekeep)

    def refresh(self) -> None:
        with self._refresh_lock:
            refresh_service_identity(self.transport.request, self.topo.ca_rloc, self.tpm, self.agent, None, wall_clock_ms())
            self.tpm.save(self.tpm_path)

    def _housekeep(self) -> None:
        now = wall_clock_ms()
        self.refresh()
        self.agent.expire_entries(now)
        self._ticks += 1
        if self._ticks % 10 == 0:
            report = self.agent.census_push(now, self.topo.default_resolution, self.topo.k)
            self.transport.request(self.topo.ca_rloc, "CENSUS_PUSH", report.to_wire())

    def start(self) -> "MappingNode":
        self.refresh()
        self.agent.refresh_hook = self.refresh
        self.agent.forwarder = Forwarder(self.agent, TcpTransport(), self.topo.aggregation_rloc)
        self.server.start()
        self.housekeeping.start()
        return self

    def stop(self) -> None:
        self.housekeeping.stop()
        self.server.stop()
        if self.agent.forwarder is not None:
            self.agent.forwarder.flush()
            self.agent.forwarder.close()
        self.transport.close()


class AggregationNode:
    name = "aggregation"

    def __init__(self, topo: TopologyConfig, listen: Rloc | None = None) -> None:
        self.topo = topo
        self.agent = AggregationAgent(topo.aggregation_config(), rng=_rng(topo))
        self.anchor = bytes.fromhex((topo.state_dir / "trust_anchor.hex").read_text(encoding="utf-8").strip())
        self.transport = TcpTransport()
        self.server = ServiceServer(self.name, self.agent, listen or topo.aggregation_rloc)
        self._refresh_lock = threading.Lock()
        self.housekeeping = _Periodic("aggregation-housekeeping", 1.0, self._housekeep)

    def refresh(self) -> None:
        with self._refresh_lock:
            ann = CaKeyAnnouncement.from_wire(self.transport.request(self.topo.ca_rloc, "CA_KEY", {}))
            if not ann.verify(self.anchor):
                raise StackError("CA key announcement not endorsed by the trust anchor")
            self.agent.set_trust(ann)

    def _housekeep(self) -> None:
        self.refresh()
        self.agent.close_window(wall_clock_ms())

    def start(self) -> "AggregationNode":
        self.refresh()
        self.agent.refresh_hook = self.refresh
        self.server.start()
        self.housekeeping.start()
        return self

    def stop(self) -> None:
        self.housekeeping.stop()
        self.server.stop()
        self.agent.flush()
        self.transport.close()


NODE_TYPES = {"ca": CaNode, "aggregation": AggregationNode, "mapping": MappingNode}
START_ORDER = ("ca", "aggregation", "mapping")


class ReadinessError(TimeoutError):
    def __init__(self, service: str, rloc: Rloc) -> None:
        super().__init__(f"{service} at {rloc} not ready")
        self.service = service


def wait_ready(service: str, rloc: Rloc, timeout_s: float, alive: Callable[[], bool] = lambda: True) -> None:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if ping(rloc, timeout=0.5):
            return
        if not alive():
            raise BindError(service, rloc, OSError("service exited during startup"))
        time.sleep(0.05)
    raise ReadinessError(service, rloc)


class StackHandle:
    """Running stack; :meth:`down` is idempotent."""

    def __init__(self, topo: TopologyConfig) -> None:
        self.topo = topo
        self.nodes: list = []
        self.processes: list[tuple[str, subprocess.Popen]] = []
        self._down = False

    def rloc_of(self, service: str) -> Rloc:
        return getattr(self.topo, f"{service}_rloc")

    def down(self) -> None:
        if self._down:
            return
        self._down = True
        for node in reversed(self.nodes):
            node.stop()
        for _, proc in reversed(self.processes):
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        for _, proc in reversed(self.processes):
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self) -> "StackHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.down()


def up(topo: TopologyConfig) -> StackHandle:
    """Provision if needed, start CA, aggregation and mapping, and wait for readiness."""
    provision(topo)
    handle = StackHandle(topo)
    try:
        if topo.mode == "thread":
            for name in START_ORDER:
                node = NODE_TYPES[name](topo)
                node.start()
                handle.nodes.append(node)
                wait_ready(name, handle.rloc_of(name), topo.readiness_timeout_s)
        else:
            cfg = topo.state_dir / "topology.json"
            cfg.write_text(json.dumps(topo.to_json(), indent=2), encoding="utf-8")
            env = dict(os.environ)
            src = str(Path(__file__).resolve().parent.parent)
            env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
            for name in START_ORDER:
                with open(topo.state_dir / f"{name}.log", "ab") as errlog:
                    proc = subprocess.Popen(
                        [sys.executable, "-m", "nexagon", name, "--config", str(cfg)],
                        env=env,
                        stdout=subprocess.DEVNULL,
                        stderr=errlog,
                    )
                handle.processes.append((name, proc))
                wait_ready(name, handle.rloc_of(name), topo.readiness_timeout_s, lambda p=proc: p.poll() is None)
    except BaseException:
        handle.down()
        raise
    return handle


def serve_forever(node) -> int:
    """Run one node until SIGINT/SIGTERM. Used by the per-service CLI commands."""
    stop = threading.Event()

    def _stop(*_: object) -> None:
        stop.set()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    node.start()
    log.info("%s ready", node.name)
    stop.wait()
    node.stop()
    return 0
