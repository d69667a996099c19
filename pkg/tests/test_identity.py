import json
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nexagon.identity import (
    EID_BYTES,
    PERMISSION_PUBLISH,
    AttestationReplay,
    CaKeyring,
    CertificateError,
    EndorsementRegistry,
    MalformedAttestation,
    PseudonymCertificate,
    Rloc,
    SoftwareTpm,
    UnknownEndorsementKey,
    generate_eid,
    issue_pseudonym_cert,
    public_bytes,
    rotate_ca_key,
    seal,
    tpm_create,
    unseal,
    verify_attestation,
    verify_cert,
    verify_signature,
)

NOW = 1_700_000_000_000
LIFETIME = 600_000


@pytest.fixture
def keyring():
    return CaKeyring.create(random.Random(1))


def _registered_tpm(keyring, rng=None):
    registry = EndorsementRegistry()
    tpm = tpm_create("ca.test", keyring.trust_anchor, rng or random.Random(2))
    registry.register(tpm.endorsement_public)
    return tpm, registry


def test_tpm_create_fields():
    a = tpm_create("ca.test", b"\x01" * 32, random.Random(1))
    b = tpm_create("ca.test", b"\x01" * 32, random.Random(2))
    assert a.endorsement_public != b.endorsement_public
    assert a.provisioned_server_name == "ca.test"
    assert a.counter == 0


def test_tpm_exposes_no_endorsement_private_key():
    tpm = tpm_create("ca.test", b"\x01" * 32, random.Random(1))
    public_names = [n for n in dir(tpm) if not n.startswith("_")]
    assert not any("private" in n or "secret" in n for n in public_names)
    _, fresh = tpm.attest(CaKeyring.create(random.Random(3)).encryption_public)
    assert public_bytes(fresh) != tpm.endorsement_public


def test_attestation_signature_and_counter(keyring):
    tpm, _ = _registered_tpm(keyring)
    r1, k1 = tpm.attest(keyring.encryption_public)
    r2, k2 = tpm.attest(keyring.encryption_public)
    assert verify_signature(tpm.endorsement_public, r1.tpm_signature, r1.signed_bytes())
    assert (r1.counter, r2.counter) == (1, 2)
    assert public_bytes(k1) != public_bytes(k2)


def test_tampering_any_identity_byte_breaks_signature(keyring):
    tpm, _ = _registered_tpm(keyring)
    req, _ = tpm.attest(keyring.encryption_public)
    blob = req.encrypted_identity
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0x01
        tampered = replace(req, encrypted_identity=bytes(bad))
        assert not verify_signature(tpm.endorsement_public, tampered.tpm_signature, tampered.signed_bytes())


def test_verify_attestation_round_trip_replay_and_unknown(keyring):
    tpm, registry = _registered_tpm(keyring)
    req, _ = tpm.attest(keyring.encryption_public)
    identity = verify_attestation(req, registry, keyring.encryption_key)
    assert identity == tpm.identity
    with pytest.raises(AttestationReplay):
        verify_attestation(req, registry, keyring.encryption_key)
    rogue = tpm_create("ca.test", keyring.trust_anchor, random.Random(9))
    rogue_req, _ = rogue.attest(keyring.encryption_public)
    with pytest.raises(UnknownEndorsementKey):
        verify_attestation(rogue_req, registry, keyring.encryption_key)


def test_verify_attestation_wrong_ca_key_is_malformed(keyring):
    tpm, registry = _registered_tpm(keyring)
    other = CaKeyring.create(random.Random(77))
    req, _ = tpm.attest(other.encryption_public)
    with pytest.raises(MalformedAttestation):
        verify_attestation(req, registry, keyring.encryption_key)


def test_attestation_wire_round_trip_is_unlinkable(keyring):
    tpm, _ = _registered_tpm(keyring)
    a, _ = tpm.attest(keyring.encryption_public)
    b, _ = tpm.attest(keyring.encryption_public)
    wire = json.dumps(a.to_wire())
    assert tpm.endorsement_public.hex() not in wire
    assert a.encrypted_identity != b.encrypted_identity
    assert type(a).from_wire(a.to_wire()) == a


def test_issue_and_verify_cert(keyring):
    cert = issue_pseudonym_cert(b"\x02" * 32, {PERMISSION_PUBLISH}, NOW, LIFETIME, keyring, rng=random.Random(4))
    assert verify_cert(cert, keyring.epoch, keyring.epoch_public, NOW)
    assert verify_cert(cert, keyring.epoch, keyring.epoch_public, NOW + LIFETIME)
    assert not verify_cert(cert, keyring.epoch, keyring.epoch_public, NOW + LIFETIME + 1)
    assert PseudonymCertificate.from_bytes(cert.to_bytes()) == cert
    with pytest.raises(CertificateError):
        issue_pseudonym_cert(b"\x02" * 32, {PERMISSION_PUBLISH}, NOW, LIFETIME + 1, keyring, max_lifetime=LIFETIME)


def test_rotation_invalidates_prior_certs(keyring):
    certs = [
        issue_pseudonym_cert(bytes([i]) * 32, {PERMISSION_PUBLISH}, NOW, LIFETIME, keyring, rng=random.Random(i))
        for i in range(10)
    ]
    old_epoch, old_key = keyring.epoch, keyring.epoch_public
    assert rotate_ca_key(keyring, random.Random(5)) == old_epoch + 1
    assert keyring.epoch_public != old_key
    assert keyring.retired[old_epoch] == old_key
    assert not any(verify_cert(c, keyring.epoch, keyring.epoch_public, NOW) for c in certs)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(-5, 5))
def test_epoch_gate(epoch, delta):
    keyring = CaKeyring.create(random.Random(epoch))
    keyring.epoch = epoch
    cert = issue_pseudonym_cert(b"\x03" * 32, {PERMISSION_PUBLISH}, NOW, LIFETIME, keyring, rng=random.Random(1))
    assert verify_cert(cert, epoch + delta, keyring.epoch_public, NOW) == (delta == 0)


def test_eids_distinct_and_128_bit():
    rng = random.Random(11)
    eids = [generate_eid(rng) for _ in range(10_000)]
    assert len({e.value for e in eids}) == 10_000
    assert all(len(e.value) * 8 == 128 == EID_BYTES * 8 for e in eids)


def _chi_square_independence(pairs):
    """Chi-square statistic over the 2x2 table of (bit in draw n, bit in draw n+1), summed per position."""
    stats = []
    for bit in range(128):
        table = [[0, 0], [0, 0]]
        for a, b in pairs:
            table[(a >> bit) & 1][(b >> bit) & 1] += 1
        n = len(pairs)
        rows = [sum(r) for r in table]
        cols = [table[0][j] + table[1][j] for j in range(2)]
        chi = 0.0
        for i in range(2):
            for j in range(2):
                exp = rows[i] * cols[j] / n
                chi += (table[i][j] - exp) ** 2 / exp
        stats.append(chi)
    return stats


def test_consecutive_eids_uncorrelated():
    rng = random.Random(12)
    draws = [int.from_bytes(generate_eid(rng).value, "big") for _ in range(4000)]
    stats = _chi_square_independence(list(zip(draws, draws[1:])))
    # 1 degree of freedom: P(chi2 > 6.635) = 0.01. Across 128 positions expect ~1.3 exceedances.
    exceed = sum(s > 6.635 for s in stats)
    assert exceed <= 6
    # Sum over positions is chi2 with 128 dof; its 0.99 quantile is about 166.
    assert sum(stats) < 166.0


def test_seal_round_trip_and_tamper():
    kr = CaKeyring.create(random.Random(1))
    blob = seal(kr.encryption_public, b"secret", random.Random(2))
    assert unseal(kr.encryption_key, blob) == b"secret"
    bad = bytearray(blob)
    bad[-1] ^= 1
    with pytest.raises(Exception):
        unseal(kr.encryption_key, bytes(bad))


def test_rloc_validation():
    assert Rloc.parse("10.0.0.1:4000") == Rloc("10.0.0.1", 4000)
    assert Rloc.parse("[::1]:80") == Rloc("::1", 80)
    for bad in ("nohost", "a:0", "a:99999", "bad host:1"):
        with pytest.raises(ValueError):
            Rloc.parse(bad)


def test_tpm_and_keyring_persistence(tmp_path, keyring):
    tpm, registry = _registered_tpm(keyring)
    tpm.attest(keyring.encryption_public)
    tpm.save(tmp_path / "tpm.json")
    loaded = SoftwareTpm.load(tmp_path / "tpm.json", random.Random(3))
    assert loaded.endorsement_public == tpm.endorsement_public
    assert loaded.counter == 1 and loaded.identity == tpm.identity
    req, _ = loaded.attest(keyring.encryption_public)
    assert req.counter == 2
    keyring.save_long_term(tmp_path / "ca.json")
    again = CaKeyring.load_long_term(tmp_path / "ca.json", random.Random(4))
    assert again.trust_anchor == keyring.trust_anchor
    assert again.encryption_public == keyring.encryption_public
    assert verify_attestation(req, registry, again.encryption_key) == tpm.identity
