"""Deterministic attack scenarios driven through the in-process service stack."""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Literal

from ..ca_service import CaConfig
from ..client_agent import ClientAgent, ClientConfig
from ..events import ATTRIBUTES, DUMMY, EventUpdate
from ..hexgrid import HexCellId
from ..identity import Eid
from ..mapping_agent import MappingConfig
from ..stack import LocalStack, StackConfig
from ..wire import ServiceError
from .traces import MovementTrace, Road, dense_traces, sparse_trace

REAL_ATTRIBUTES = tuple(a for a in ATTRIBUTES if a != DUMMY)
TOGGLES = (
    "eid_rotation",
    "adaptive_resolution",
    "dummy_traffic",
    "nonce_check",
    "mutual_auth",
    "tpm_attestation",
    "audit_signing",
)


@dataclass
class ScenarioConfig:
    scenario: Literal["sparse", "dense"] = "sparse"
    eid_rotation: bool = True
    adaptive_resolution: bool = True
    dummy_traffic: bool = False
    nonce_check: bool = True
    mutual_auth: bool = True
    tpm_attestation: bool = True
    audit_signing: bool = True
    # Mix-network routing is listed as a mitigation but has no testable
    # parameters; the toggle exists only so that asking for it fails loudly.
    mix_network: bool = False
    k: int = 5
    num_clients: int = 50
    resolution: int = 9
    extent_m: float = 120.0
    target_cells: int = 40
    duration_s: float = 600.0
    report_period_s: float = 5.0
    rotation_period_s: float = 60.0
    eid_swap_period_s: float = 60.0
    eid_swap_jitter: float = 0.25
    events_per_eid_max: int = 50
    dummy_rate: float = 0.2
    inject_duplicates: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in ("sparse", "dense"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.mix_network:
            raise NotImplementedError("mix-network routing is not modelled")

    @classmethod
    def all_off(cls, **overrides) -> "ScenarioConfig":
        base = {t: False for t in TOGGLES}
        base.update(overrides)
        return cls(**base)

    def toggles(self) -> dict[str, bool]:
        return {t: getattr(self, t) for t in TOGGLES}


@dataclass(frozen=True)
class AdversaryObservation:
    """What an on-path observer of PUBLISH frames learns from one frame.

    Certificate serials and signatures are assumed to travel in encrypted
    transport metadata and are not exposed here.
    """

    observed_eid: Eid
    cell: HexCellId
    timestamp: int
    epoch: int


class _GroundTruth:
    """Sealed scoring data. Adversary functions never receive this object."""

    def __init__(self) -> None:
        self.client_of: list[int] = []
        self.is_dummy: list[bool] = []
        self.traces: list[MovementTrace] = []
        self.road: Road | None = None


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    observations: list[AdversaryObservation]
    road_cells: frozenset[HexCellId] = frozenset()
    counters: dict[str, int] = field(default_factory=dict)
    stack: LocalStack | None = field(default=None, repr=False)
    _truth: _GroundTruth = field(default_factory=_GroundTruth, repr=False)


def generate_traces(config: ScenarioConfig, rng: random.Random) -> tuple[list[MovementTrace], Road | None]:
    period = int(config.report_period_s * 1000)
    if config.scenario == "sparse":
        trace, road = sparse_trace(
            rng, resolution=config.resolution, target_cells=config.target_cells, report_period_ms=period
        )
        return [trace], road
    traces, _ = dense_traces(
        rng,
        num_clients=config.num_clients,
        resolution=config.resolution,
        extent_m=config.extent_m,
        duration_ms=int(config.duration_s * 1000),
        report_period_ms=period,
    )
    return traces, None


def _stack_for(config: ScenarioConfig, rng: random.Random) -> LocalStack:
    rotation_ms = int(config.rotation_period_s * 1000)
    lifetime = max(rotation_ms * 2, 600_000)
    ca = CaConfig(
        rotation_period_ms=rotation_ms,
        cert_lifetime_ms=lifetime,
        max_cert_lifetime_ms=lifetime,
        k=config.k,
        default_resolution=config.resolution,
        require_registered=config.tpm_attestation,
    )
    mapping = MappingConfig(nonce_check=config.nonce_check, census_resolution=config.resolution, k=config.k)
    return LocalStack(StackConfig(ca=ca, mapping=mapping, sign_audit=config.audit_signing), rng)


def client_config(config: ScenarioConfig, server_name: str) -> ClientConfig:
    return ClientConfig(
        server_name=server_name,
        eid_swap_period_ms=int(config.eid_swap_period_s * 1000),
        eid_swap_jitter=config.eid_swap_jitter,
        events_per_eid_max=config.events_per_eid_max,
        dummy_rate=config.dummy_rate if config.dummy_traffic else 0.0,
        requested_resolution=config.resolution,
        k=config.k,
        eid_rotation=config.eid_rotation,
        adaptive_resolution=config.adaptive_resolution,
        mutual_auth=config.mutual_auth,
    )


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Drive clients along their traces and record every PUBLISH frame on the wire.

    Events are processed in a single total order (time, then sequence), so a
    fixed seed reproduces identical observations.
    """
    rng = random.Random(config.seed)
    traces, road = generate_traces(config, random.Random(rng.getrandbits(64)))
    stack = _stack_for(config, random.Random(rng.getrandbits(64)))
    t0 = stack.clock()
    truth = _GroundTruth()
    truth.traces = traces
    truth.road = road
    observations: list[AdversaryObservation] = []
    captured: list[dict] = []
    current: list[int | None] = [None]

    def tap(rloc, op, body) -> None:
        # Frames the adversary injects itself are not observations.
        if op != "PUBLISH" or rloc != stack.config.mapping_rloc or current[0] is None:
            return
        frame = EventUpdate.from_wire(body["event"])
        observations.append(AdversaryObservation(frame.eid, frame.cell, frame.timestamp, stack.ca.epoch))
        truth.client_of.append(current[0])
        truth.is_dummy.append(frame.attribute == DUMMY)
        captured.append(body)

    stack.net.taps.append(tap)
    ccfg = client_config(config, stack.config.server_name)
    clients: list[ClientAgent] = [
        stack.new_client(ccfg, rng=random.Random(rng.getrandbits(64))) for _ in traces
    ]
    attr_rng = random.Random(rng.getrandbits(64))
    replay_rng = random.Random(rng.getrandbits(64))
    replay_at = sorted(replay_rng.sample(range(sum(len(t.waypoints) for t in traces)), config.inject_duplicates))
    counters = {"published": 0, "rejected": 0, "replays_injected": 0, "replays_accepted": 0, "dummies": 0}

    seq = itertools.count()
    queue: list[tuple[int, int, str, int, int]] = []
    for cid, tr in enumerate(traces):
        for idx, (_, t) in enumerate(tr.waypoints):
            heapq.heappush(queue, (t0 + t, next(seq), "report", cid, idx))
    dummy_scheduled = [False] * len(clients)
    real_index = 0

    while queue:
        now, _, kind, cid, idx = heapq.heappop(queue)
        stack.tick(now)
        client = clients[cid]
        current[0] = cid
        if kind == "report":
            coord = traces[cid].waypoints[idx][0]
            try:
                client.publish(attr_rng.choice(REAL_ATTRIBUTES), coord, now)
                counters["published"] += 1
            except ServiceError:
                counters["rejected"] += 1
            if replay_at and replay_at[0] == real_index:
                replay_at.pop(0)
                heapq.heappush(queue, (now + 2_000, next(seq), "replay", cid, len(captured) - 1))
            real_index += 1
        elif kind == "replay":
            counters["replays_injected"] += 1
            current[0] = None
            try:
                stack.net.request(stack.config.mapping_rloc, "PUBLISH", captured[idx])
                counters["replays_accepted"] += 1
            except ServiceError:
                pass
        elif kind == "dummy":
            dummy_scheduled[cid] = False
            if now <= t0 + traces[cid].waypoints[-1][1]:
                while client.dummy_tick(now) is not None:
                    counters["dummies"] += 1
        if config.dummy_traffic and kind != "replay" and not dummy_scheduled[cid] and client.current_cell is not None:
            client.dummy_tick(now)
            if client.next_dummy_at is not None and client.next_dummy_at <= t0 + traces[cid].waypoints[-1][1]:
                heapq.heappush(queue, (max(now, math.ceil(client.next_dummy_at)), next(seq), "dummy", cid, 0))
                dummy_scheduled[cid] = True
    stack.finish()

    road_cells = frozenset(road.cells(config.resolution)) if road is not None else frozenset()
    result = ScenarioResult(config, observations, road_cells, counters, stack)
    result._truth = truth
    return result
