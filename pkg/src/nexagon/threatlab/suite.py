"""Active attacks: impostor CA, unregistered TPM, frame replay, forged audit record."""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field

from ..ca_service import CaConfig, CertificateAuthority
from ..client_agent import ClientAgent, SpoofedAgentError
from ..hexgrid import GeoCoordinate
from ..identity import EndorsementRegistry, Rloc, SealError
from ..mapping_agent import AuditRecord, rejected_verdict, verify_audit_chain
from ..wire import ServiceError
from .scenario import ScenarioConfig, _stack_for, client_config

DEFEATED = "defeated"
SUCCEEDED = "succeeded"
ATTACKS = ("impostor_ca", "unregistered_tpm", "frame_replay", "forged_audit_record")
# The mitigation toggle whose removal should let each attack through.
MITIGATION_OF = {
    "impostor_ca": "mutual_auth",
    "unregistered_tpm": "tpm_attestation",
    "frame_replay": "nonce_check",
    "forged_audit_record": "audit_signing",
}


@dataclass
class SuiteReport:
    toggles: dict[str, bool]
    outcomes: dict[str, str] = field(default_factory=dict)
    details: dict[str, str] = field(default_factory=dict)

    @property
    def defeated(self) -> int:
        return sum(1 for v in self.outcomes.values() if v == DEFEATED)

    def summary(self) -> str:
        lines = [f"{self.defeated}/{len(self.outcomes)} attacks defeated"]
        lines += [f"  {a}: {self.outcomes[a]} ({self.details.get(a, '')})" for a in ATTACKS if a in self.outcomes]
        return "\n".join(lines)


def forge_audit_log(records: list[AuditRecord], index: int) -> list[AuditRecord]:
    """Flip one verdict and rebuild the hash chain from there, as an attacker without the key would."""
    forged = list(records[:index])
    prev = forged[-1].record_hash() if forged else records[0].prev_hash
    for i, rec in enumerate(records[index:], start=index):
        verdict = rec.verdict
        if i == index:
            verdict = rejected_verdict("replay") if rec.verdict == "accepted" else "accepted"
        new = dataclasses.replace(rec, verdict=verdict, prev_hash=prev)
        forged.append(new)
        prev = new.record_hash()
    return forged


def spoof_and_replay_suite(config: ScenarioConfig | None = None) -> SuiteReport:
    config = config or ScenarioConfig()
    rng = random.Random(config.seed)
    stack = _stack_for(config, random.Random(rng.getrandbits(64)))
    report = SuiteReport(config.toggles())
    ccfg = client_config(config, stack.config.server_name)
    now = stack.clock()
    here = GeoCoordinate(47.3769, 8.5417)

    # (a) DNS points the client at an impostor CA that accepts anyone.
    impostor_rloc = Rloc("10.66.0.1", 4000)
    impostor = CertificateAuthority(
        CaConfig(require_registered=False),
        EndorsementRegistry(),
        impostor_rloc,
        impostor_rloc,
        rng=random.Random(rng.getrandbits(64)),
    )
    stack.net.bind(impostor_rloc, impostor)
    victim = stack.new_client(ccfg, rng=random.Random(rng.getrandbits(64)))
    victim.resolver = {stack.config.server_name: impostor_rloc}
    try:
        victim.onboard(now)
        try:
            leaked = impostor.open_escrow(victim.session.certificate.serial, "impostor")
            detail = "session established; device identity disclosed" if leaked == victim.tpm.identity else "session established"
        except (KeyError, SealError):
            detail = "session established"
        report.outcomes["impostor_ca"] = SUCCEEDED
        report.details["impostor_ca"] = detail
    except SpoofedAgentError as exc:
        report.outcomes["impostor_ca"] = DEFEATED
        report.details["impostor_ca"] = f"client aborted: {exc}"

    # (b) A device whose endorsement key was never enrolled.
    rogue = stack.new_client(ccfg, rng=random.Random(rng.getrandbits(64)), register=False)
    try:
        rogue.onboard(now)
        report.outcomes["unregistered_tpm"] = SUCCEEDED
        report.details["unregistered_tpm"] = "certificate issued"
    except ServiceError as exc:
        report.outcomes["unregistered_tpm"] = DEFEATED
        report.details["unregistered_tpm"] = f"CA answered {exc.code}"

    # (c) Capture an honest PUBLISH and resend it verbatim.
    captured: list[dict] = []
    stack.net.taps.append(lambda rloc, op, body: captured.append(body) if op == "PUBLISH" else None)
    honest: ClientAgent = stack.new_client(ccfg, rng=random.Random(rng.getrandbits(64)))
    honest.publish("hazard", here, now)
    stack.clock.advance(1_000)
    try:
        stack.net.request(stack.config.mapping_rloc, "PUBLISH", captured[-1])
        report.outcomes["frame_replay"] = SUCCEEDED
        report.details["frame_replay"] = "duplicate accepted"
    except ServiceError as exc:
        report.outcomes["frame_replay"] = DEFEATED
        report.details["frame_replay"] = f"mapping answered {exc.code}"

    # (d) Tamper with the audit log and recompute the chain.
    records = stack.mapping.audit.records()
    forged = forge_audit_log(records, 0)
    if verify_audit_chain(forged, stack.mapping.audit.public_key):
        report.outcomes["forged_audit_record"] = SUCCEEDED
        report.details["forged_audit_record"] = "forged log verifies"
    else:
        report.outcomes["forged_audit_record"] = DEFEATED
        report.details["forged_audit_record"] = "verification failed"
    return report
