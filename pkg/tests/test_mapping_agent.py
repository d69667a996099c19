import json
import random
from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nexagon.events import EventUpdate
from nexagon.hexgrid import GeoCoordinate, cell_children, cell_parent, latlng_to_cell
from nexagon.identity import generate_eid, new_signing_key
from nexagon.mapping_agent import (
    ACCEPTED,
    BAD_SIGNATURE,
    CLOCK_SKEW,
    REPLAY,
    STALE_EPOCH,
    UNKNOWN_CERT,
    Ack,
    AuditLog,
    ReplayGuard,
    Rejected,
    parse_audit_ndjson,
    rejected_verdict,
    verify_audit_chain,
)
from nexagon.stack import LocalStack, StackConfig

HOME = GeoCoordinate(48.137, 11.575)


def _frame(session, eid, now, cell=None, nonce=None, attribute="hazard"):
    return EventUpdate(
        eid=eid,
        cell=cell or latlng_to_cell(HOME, 9),
        attribute=attribute,
        timestamp=now,
        nonce=nonce or random.Random(now).randbytes(16),
        cert_serial=session.certificate.serial,
    ).signed_with(session.key)


@pytest.fixture
def onboarded(stack):
    client = stack.new_client()
    session = client.onboard(stack.clock())
    return stack, client, session


def _publish(stack, session, frame, first=False):
    cert = session.certificate if first else None
    return stack.mapping.handle_publish(frame, None, stack.clock(), cert)


def test_valid_frame_accepted_upserted_forwarded(onboarded):
    stack, client, session = onboarded
    eid = generate_eid(random.Random(1))
    ack = _publish(stack, session, _frame(session, eid, stack.clock()), first=True)
    assert ack.status == ACCEPTED
    assert stack.mapping.entries[eid].cert_serial == session.certificate.serial
    assert stack.aggregation.ingested == 1
    assert ack.verify(session.announcement, stack.clock())


def test_identical_frame_resent_is_replay(onboarded):
    stack, _, session = onboarded
    frame = _frame(session, generate_eid(random.Random(1)), stack.clock())
    _publish(stack, session, frame, first=True)
    with pytest.raises(Rejected) as exc:
        _publish(stack, session, frame)
    assert exc.value.code == REPLAY


def test_pre_rotation_cert_is_stale_epoch(onboarded):
    stack, _, session = onboarded
    eid = generate_eid(random.Random(1))
    _publish(stack, session, _frame(session, eid, stack.clock()), first=True)
    stack.rotate(stack.clock() + 1000)
    with pytest.raises(Rejected) as cached:
        _publish(stack, session, _frame(session, eid, stack.clock(), nonce=b"\x01" * 16))
    with pytest.raises(Rejected) as attached:
        _publish(stack, session, _frame(session, eid, stack.clock(), nonce=b"\x02" * 16), first=True)
    assert cached.value.code == attached.value.code == STALE_EPOCH


def test_bad_signature_unknown_cert_and_skew(onboarded):
    stack, _, session = onboarded
    now = stack.clock()
    eid = generate_eid(random.Random(1))
    with pytest.raises(Rejected) as unknown:
        _publish(stack, session, _frame(session, eid, now))
    assert unknown.value.code == UNKNOWN_CERT
    forged = replace(_frame(session, eid, now), attribute="crash")
    with pytest.raises(Rejected) as bad:
        _publish(stack, session, forged, first=True)
    assert bad.value.code == BAD_SIGNATURE
    with pytest.raises(Rejected) as skew:
        _publish(stack, session, _frame(session, eid, now - 31_000), first=True)
    assert skew.value.code == CLOCK_SKEW


def test_every_frame_gets_exactly_one_audit_record(onboarded):
    stack, _, session = onboarded
    rng = random.Random(4)
    eid = generate_eid(rng)
    frames = [_frame(session, eid, stack.clock(), nonce=rng.randbytes(16)) for _ in range(20)]
    frames += frames[:5]
    outcomes = []
    for i, f in enumerate(frames):
        try:
            _publish(stack, session, f, first=(i == 0))
            outcomes.append(ACCEPTED)
        except Rejected as exc:
            outcomes.append(rejected_verdict(exc.code))
    records = stack.mapping.audit.records()
    assert [r.verdict for r in records] == outcomes
    assert [r.event_digest for r in records] == [f.digest() for f in frames]
    assert stack.mapping.accepted == outcomes.count(ACCEPTED) == stack.aggregation.ingested == 20


def _audit_log(n=12):
    log = AuditLog(new_signing_key(random.Random(3)))
    for i in range(n):
        log.append(f"{i:064x}", ACCEPTED if i % 3 else rejected_verdict(REPLAY), 1000 + i)
    return log


def test_audit_chain_untouched_verifies():
    log = _audit_log()
    assert verify_audit_chain(log.records(), log.public_key)
    assert verify_audit_chain(parse_audit_ndjson(log.export_ndjson()), log.public_key)


def test_flipping_any_single_verdict_breaks_chain():
    log = _audit_log()
    records = log.records()
    for i, r in enumerate(records):
        flipped = rejected_verdict(REPLAY) if r.verdict == ACCEPTED else ACCEPTED
        mutated = records[:i] + [replace(r, verdict=flipped)] + records[i + 1 :]
        assert not verify_audit_chain(mutated, log.public_key)
        # The hash chain alone also catches it, except for the tail record.
        if i < len(records) - 1:
            assert not verify_audit_chain(mutated, None)


def test_deleting_a_middle_record_breaks_chain():
    log = _audit_log()
    records = log.records()
    assert not verify_audit_chain(records[:5] + records[6:], log.public_key)


def test_audit_file_matches_memory(tmp_path):
    from nexagon.mapping_agent import MappingAgent, MappingConfig

    agent = MappingAgent(MappingConfig(audit_path=tmp_path / "audit.ndjson"), rng=random.Random(1))
    for i in range(5):
        agent.audit.append(f"{i:064x}", ACCEPTED, i)
    on_disk = parse_audit_ndjson((tmp_path / "audit.ndjson").read_text())
    assert on_disk == agent.audit.records()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 15), st.integers(0, 5_000)), max_size=120))
def test_replay_guard_accepts_each_pair_once_within_window(stream):
    # Within the window a (serial, nonce) pair is accepted at most once.
    seen: dict[tuple[int, int], int] = {}
    guard = ReplayGuard(window_ms=10_000)
    now = 0
    for serial, nonce_id, dt in stream:
        now += dt
        ok = guard.check_and_record(serial, bytes([nonce_id]) * 16, now)
        last = seen.get((serial, nonce_id))
        if last is not None and now - last <= 10_000:
            assert not ok
        if ok:
            seen[(serial, nonce_id)] = now


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 4), st.booleans()), min_size=1, max_size=30), st.integers(0, 1000))
def test_kv_uniqueness_under_random_operations(ops, seed):
    stack = LocalStack(StackConfig(), random.Random(seed))
    rng = random.Random(seed)
    sessions = []
    for _ in range(3):
        c = stack.new_client()
        sessions.append(c.onboard(stack.clock()))
    eids = [generate_eid(rng) for _ in range(5)]
    first = [True] * 3
    for who, which, dup in ops:
        s = sessions[who]
        nonce = b"\x07" * 16 if dup else rng.randbytes(16)
        try:
            _publish(stack, s, _frame(s, eids[which], stack.clock(), nonce=nonce), first=first[who])
            first[who] = False
        except Rejected:
            pass
        entries = list(stack.mapping.entries.values())
        assert len({e.eid for e in entries}) == len(entries)
        assert len({e.cert_serial for e in entries}) == len(entries)
        assert sum(stack.mapping.census(9, stack.clock()).values()) == len(entries)


def test_census_rolls_up_ten_clients_to_parent(stack):
    home5 = latlng_to_cell(HOME, 5)
    fine = cell_children(home5, 9)[::240][:10]
    assert len(fine) == 10
    for cell in fine:
        client = stack.new_client()
        s = client.onboard(stack.clock())
        _publish(stack, s, _frame(s, generate_eid(random.Random(str(cell))), stack.clock(), cell=cell), first=True)
    census = stack.mapping.census(3, stack.clock())
    expected = Counter(cell_parent(c, 3) for c in fine)  # brute-force parent aggregation
    assert census == dict(expected)
    assert census == {cell_parent(home5, 3): 10}


def test_census_empty_and_expiry(onboarded):
    stack, _, session = onboarded
    assert stack.mapping.census(9, stack.clock()) == {}
    _publish(stack, session, _frame(session, generate_eid(random.Random(1)), stack.clock()), first=True)
    assert stack.mapping.expire_entries(stack.clock()) == 0
    later = stack.clock() + stack.config.mapping.staleness_ms + 1
    assert stack.mapping.expire_entries(later) == 1
    assert stack.mapping.expire_entries(later) == 0
    assert stack.mapping.census(9, later) == {}


def test_census_wire_carries_counts_only(onboarded):
    stack, _, session = onboarded
    eid = generate_eid(random.Random(1))
    _publish(stack, session, _frame(session, eid, stack.clock()), first=True)
    body = stack.mapping.dispatch("CENSUS", {"resolution": 7}, None)
    text = json.dumps(body)
    assert str(eid) not in text
    assert f"{session.certificate.serial:032x}" not in text
    assert set(body) == {"resolution", "counts"}
    assert all(isinstance(v, int) for v in body["counts"].values())


def test_audit_export_over_dispatch(onboarded):
    stack, _, session = onboarded
    _publish(stack, session, _frame(session, generate_eid(random.Random(1)), stack.clock()), first=True)
    body = stack.mapping.dispatch("AUDIT_EXPORT", {}, None)
    records = parse_audit_ndjson(body["ndjson"])
    assert len(records) == 1 and verify_audit_chain(records, stack.mapping.audit.public_key)


def test_tampered_ack_fails_verification(onboarded):
    stack, _, session = onboarded
    frame = _frame(session, generate_eid(random.Random(1)), stack.clock())
    ack = _publish(stack, session, frame, first=True)
    assert Ack.from_wire(ack.to_wire()).verify(session.announcement, stack.clock())
    assert not replace(ack, event_digest="0" * 64).verify(session.announcement, stack.clock())
