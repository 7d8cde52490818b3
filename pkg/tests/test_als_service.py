import json
import random

import pytest

from nusa.crypto_core import (
    add_layer,
    derive_obfuscation_key,
    generate_key,
    generate_pid,
    obfuscate,
    remove_layer,
    wrap_pid,
)
from nusa.ehr_store import MedicalRecord
from nusa.errors import (
    AuthFailed,
    DuplicateTicket,
    InvalidPayload,
    InvalidStage,
    NotAuthorized,
    NotFound,
    SessionExpired,
)

from conftest import make_identity


class Actor:
    """Terminal-side crypto done inline, against the service API directly."""

    def __init__(self, als, name, role, rng):
        self.als = als
        self.name = name
        self.rng = rng
        self.key = generate_key(rng)
        als.enroll(name, f"cred-{name}", role, key_id=self.key.key_id)
        self.token = als.authenticate(name, f"cred-{name}").token

    def relogin(self):
        self.token = self.als.authenticate(self.name, f"cred-{self.name}").token

    def epid_of(self, pid):
        return add_layer(wrap_pid(pid), self.key, rng=self.rng)


@pytest.fixture
def rng():
    return random.Random(7)


@pytest.fixture
def pmd(als, rng):
    return Actor(als, "pmd1", "MD", rng)


@pytest.fixture
def smd(als, rng):
    return Actor(als, "smd1", "MD", rng)


@pytest.fixture
def patient(als, rng):
    return Actor(als, "pat1", "PATIENT", rng)


def populate(als, actor, i, stores=(0,), clear=None, obf=None):
    pid = generate_pid(actor.rng)
    rid = als.populate(
        actor.token,
        make_identity(i),
        actor.epid_of(pid),
        pid,
        clear or {"marker": f"m-{i}"},
        obf or {},
        store_indexes=stores,
    )
    return pid, rid


def run_delegation(als, pmd, smd, fiscal, windows=(), tamper_body=False):
    """offer -> accept -> complete, returning the smd-side grant epid."""
    (tid,) = als.delegate_offer(pmd.token, [{"fiscal_code": fiscal}], smd.name)
    (offer,) = [t for t in als.inbox(smd.token) if t.ticket_id == tid]
    payload = offer.payload
    if tamper_body:
        from nusa.crypto_core import LayeredCiphertext

        body = bytes([payload.body[0] ^ 0xFF]) + payload.body[1:]
        payload = LayeredCiphertext(body, payload.layers)
    eepid = add_layer(payload, smd.key, rng=smd.rng)
    als.accept_ticket(smd.token, tid, eepid)
    (accepted,) = [t for t in als.pmd_inbox(pmd.token) if t.ticket_id == tid]
    grantee_epid = remove_layer(accepted.payload, pmd.key)
    als.complete_ticket(pmd.token, tid, grantee_epid, windows=windows)
    return grantee_epid


# -- authentication ------------------------------------------------------------------------


def test_authenticate_and_bad_credentials(als, pmd):
    with pytest.raises(AuthFailed):
        als.authenticate("pmd1", "wrong")
    with pytest.raises(AuthFailed):
        als.authenticate("ghost", "cred-ghost")


def test_session_expiry_and_renew(als, clock, pmd):
    assert als.fetch_records is not None
    clock.advance(3599)
    als.renew(pmd.token)  # pushes expiry out another lifetime
    clock.advance(3599)
    populate(als, pmd, 1)
    clock.advance(3601)
    with pytest.raises(SessionExpired):
        populate(als, pmd, 2)
    pmd.relogin()
    populate(als, pmd, 2)


def test_role_enforcement(als, pmd, patient):
    pid, _ = populate(als, pmd, 1)
    with pytest.raises(NotAuthorized):
        als.populate(
            patient.token, make_identity(9), patient.epid_of(pid), pid, {}, {}
        )
    with pytest.raises(NotAuthorized):
        als.delegate_offer(patient.token, [{"fiscal_code": make_identity(1).fiscal_code}], "pmd1")


# -- populate ------------------------------------------------------------------------------


def test_populate_creates_registry_and_stores(als, deployment, pmd):
    pid, rid = populate(als, pmd, 1, stores=(0, 1))
    assert rid == 1
    assert deployment.stores[0].has_pid(pid)
    assert deployment.stores[1].has_pid(pid)
    rec = deployment.registry.find_record({"fiscal_code": make_identity(1).fiscal_code})
    assert rec.record_id == rid


def test_populate_rolls_back_on_partial_store_failure(als, deployment, pmd, rng):
    pid = generate_pid(rng)
    # occupy the pid in the second store so the two-store populate fails late
    deployment.stores[1].insert(MedicalRecord(pid, {"squatter": 1}, {}))
    ident = make_identity(3)
    with pytest.raises(Exception):
        als.populate(
            pmd.token, ident, pmd.epid_of(pid), pid, {"a": 1}, {}, store_indexes=(0, 1)
        )
    assert not deployment.stores[0].has_pid(pid)
    with pytest.raises(NotFound):
        deployment.registry.find_record({"fiscal_code": ident.fiscal_code})
    # a later, clean populate of the same identity succeeds
    populate(als, pmd, 3)


# -- delegation staging --------------------------------------------------------------------


def test_delegation_full_flow_and_query(als, deployment, clock, pmd, smd):
    pid, rid = populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    grant_epid = run_delegation(als, pmd, smd, fiscal, windows=((clock(), clock() + 100),))
    epid, identity, got_rid = als.query_patient_epid(smd.token, {"fiscal_code": fiscal})
    assert got_rid == rid
    assert identity.fiscal_code == fiscal
    opened = remove_layer(epid, smd.key)
    assert opened.body == pid.bytes
    assert opened.layer_count == 0
    assert grant_epid == epid


def test_accept_rejects_bad_payloads(als, pmd, smd, rng):
    populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    (tid,) = als.delegate_offer(pmd.token, [{"fiscal_code": fiscal}], smd.name)
    (offer,) = als.inbox(smd.token)
    with pytest.raises(InvalidPayload):  # no layer added
        als.accept_ticket(smd.token, tid, offer.payload)
    foreign = add_layer(offer.payload, generate_key(rng), rng=rng)
    with pytest.raises(InvalidPayload):  # layer not keyed by the grantee
        als.accept_ticket(smd.token, tid, foreign)
    rebuilt = add_layer(wrap_pid(generate_pid(rng)), generate_key(rng), rng=rng)
    with pytest.raises(InvalidPayload):  # offered layers not preserved
        als.accept_ticket(smd.token, tid, add_layer(rebuilt, smd.key, rng=rng))
    with pytest.raises(NotAuthorized):  # not the grantee
        als.accept_ticket(pmd.token, tid, foreign)


def test_stage_machine_enforced(als, pmd, smd):
    populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    (tid,) = als.delegate_offer(pmd.token, [{"fiscal_code": fiscal}], smd.name)
    (offer,) = als.inbox(smd.token)
    good = add_layer(offer.payload, smd.key, rng=smd.rng)
    with pytest.raises(InvalidStage):  # complete before accept
        als.complete_ticket(pmd.token, tid, remove_layer(offer.payload, pmd.key))
    als.accept_ticket(smd.token, tid, good)
    with pytest.raises(InvalidStage):  # double accept
        als.accept_ticket(smd.token, tid, good)
    with pytest.raises(DuplicateTicket):  # second offer while one is pending
        als.delegate_offer(pmd.token, [{"fiscal_code": fiscal}], smd.name)
    als.complete_ticket(pmd.token, tid, remove_layer(good, pmd.key))
    with pytest.raises(InvalidStage):  # complete twice
        als.complete_ticket(pmd.token, tid, remove_layer(good, pmd.key))


def test_complete_verifies_grantee_metadata(als, pmd, smd, rng):
    populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    (tid,) = als.delegate_offer(pmd.token, [{"fiscal_code": fiscal}], smd.name)
    (offer,) = als.inbox(smd.token)
    eepid = add_layer(offer.payload, smd.key, rng=rng)
    als.accept_ticket(smd.token, tid, eepid)
    with pytest.raises(InvalidPayload):  # pmd layer still present
        als.complete_ticket(pmd.token, tid, eepid)
    with pytest.raises(InvalidPayload):  # keyed by someone else entirely
        als.complete_ticket(
            pmd.token, tid, add_layer(wrap_pid(generate_pid(rng)), generate_key(rng), rng=rng)
        )


def test_corrupted_body_passes_metadata_checks_but_breaks_downstream(als, pmd, smd):
    """The ALS has no keys, so a flipped ciphertext bit is invisible to it;
    the grant completes and the failure surfaces as a miss at fetch time."""
    pid, _ = populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    run_delegation(als, pmd, smd, fiscal, tamper_body=True)
    epid, _, _ = als.query_patient_epid(smd.token, {"fiscal_code": fiscal})
    wrong_pid = remove_layer(epid, smd.key)
    assert wrong_pid.body != pid.bytes
    from nusa.crypto_core import PatientIdentifier

    with pytest.raises(NotFound):
        als.fetch_records(smd.token, PatientIdentifier(wrong_pid.body))


# -- patient access and visibility -----------------------------------------------------------


def access_flow(als, pmd, patient, fiscal, pid):
    tid = als.request_access(patient.token, {"fiscal_code": fiscal})
    (offer,) = [t for t in als.inbox(patient.token) if t.ticket_id == tid]
    eepid = add_layer(offer.payload, patient.key, rng=patient.rng)
    als.accept_ticket(patient.token, tid, eepid)
    (accepted,) = [t for t in als.pmd_inbox(pmd.token) if t.ticket_id == tid]
    als.complete_ticket(
        pmd.token, tid, remove_layer(accepted.payload, pmd.key), pid=pid
    )


def test_patient_access_stamps_owner_and_visibility(als, deployment, pmd, smd, patient, rng):
    okey = derive_obfuscation_key("X|Y|Z|W", b"salt", iterations=4)
    blob = obfuscate(b"sensitive", okey, rng=rng)
    pid, _ = populate(als, pmd, 1, obf={"secret_note": blob})
    fiscal = make_identity(1).fiscal_code
    with pytest.raises(NotAuthorized):  # no grant yet
        als.query_patient_epid(patient.token, {"fiscal_code": fiscal})
    access_flow(als, pmd, patient, fiscal, pid)
    epid, _, _ = als.query_patient_epid(patient.token, {"fiscal_code": fiscal})
    assert remove_layer(epid, patient.key).body == pid.bytes
    assert deployment.stores[0].patient_owner_of(pid) == "pat1"

    als.set_obfuscation_visibility(patient.token, pid, "secret_note", "smd1", True)
    run_delegation(als, pmd, smd, fiscal)
    (view,) = [v for _, v in als.fetch_records(smd.token, pid)]
    assert "secret_note" not in view.obfuscated_fields
    with pytest.raises(NotAuthorized):  # MDs cannot drive visibility
        als.set_obfuscation_visibility(pmd.token, pid, "secret_note", "smd1", False)


def test_visibility_requires_owner_stamp(als, pmd, patient):
    pid, _ = populate(als, pmd, 1)
    with pytest.raises(NotAuthorized):
        als.set_obfuscation_visibility(patient.token, pid, "secret_note", "smd1", True)


# -- removal ---------------------------------------------------------------------------------


def test_two_stage_removal(als, deployment, pmd, smd):
    pid, rid = populate(als, pmd, 1, stores=(0, 1))
    fiscal = make_identity(1).fiscal_code
    run_delegation(als, pmd, smd, fiscal)
    assert als.remove_patient_stage1(pmd.token, pid) == 2
    assert not deployment.stores[0].has_pid(pid)
    epid, _, _ = als.query_patient_epid(pmd.token, {"fiscal_code": fiscal})
    assert als.remove_patient_stage2(pmd.token, epid) == rid
    with pytest.raises(NotFound):
        als.query_patient_epid(pmd.token, {"fiscal_code": fiscal})
    with pytest.raises(NotFound):
        als.query_patient_epid(smd.token, {"fiscal_code": fiscal})


def test_stage2_requires_pmd_grant(als, pmd, smd):
    pid, _ = populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    grant_epid = run_delegation(als, pmd, smd, fiscal)
    with pytest.raises(NotAuthorized):
        als.remove_patient_stage2(smd.token, grant_epid)


# -- sweeping and stats ------------------------------------------------------------------------


def test_sweep_expired_needs_md_over_wire(als, clock, pmd, smd, patient):
    populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    run_delegation(als, pmd, smd, fiscal, windows=((clock(), clock() + 10),))
    clock.advance(11)
    with pytest.raises(NotAuthorized):
        als.sweep_expired(token=patient.token)
    assert als.sweep_expired(token=pmd.token) == 1
    assert als.sweep_expired() == 0  # daemon path, no token


def test_stats_multi_store_aggregation(als, pmd):
    populate(als, pmd, 1, stores=(0,), clear={"val": 2})
    populate(als, pmd, 2, stores=(1,), clear={"val": 4})
    populate(als, pmd, 3, stores=(0,), clear={"val": 6})
    assert als.stats(pmd.token, "val", "mean") == pytest.approx(4.0)
    assert als.stats(pmd.token, "val", "mean", store_index=0) == pytest.approx(4.0)
    assert als.stats(pmd.token, "val", "count", store_index=1) == 1


def test_list_patients(als, clock, pmd, smd):
    populate(als, pmd, 1)
    populate(als, pmd, 2)
    run_delegation(als, pmd, smd, make_identity(1).fiscal_code)
    rows = als.list_patients(pmd.token)
    assert [r[0] for r in rows] == [1, 2]
    rows = als.list_patients(smd.token)
    assert [r[0] for r in rows] == [1]
    assert rows[0][1].fiscal_code == make_identity(1).fiscal_code


# -- ALS persistence holds no linkage ---------------------------------------------------------


def test_ops_log_is_argument_free(als, deployment, tmp_path, pmd, smd, patient, rng):
    okey = derive_obfuscation_key("A|B|C|D", b"salt", iterations=4)
    pid, _ = populate(als, pmd, 1, obf={"d": obfuscate(b"x", okey, rng=rng)})
    fiscal = make_identity(1).fiscal_code
    run_delegation(als, pmd, smd, fiscal)
    access_flow(als, pmd, patient, fiscal, pid)

    als_dir = deployment.config_state_dir / "als" if hasattr(deployment, "config_state_dir") else None
    from pathlib import Path

    state = Path(deployment.config.state_dir)
    ident = make_identity(1)
    for fname in sorted((state / "als").glob("*")):
        raw = fname.read_bytes()
        assert pid.bytes not in raw, fname
        assert pid.hex.encode() not in raw.lower(), fname
        for s in (ident.surname, ident.given_name, ident.fiscal_code, ident.birthdate):
            assert s.encode() not in raw, (fname, s)


def test_ticket_journal_survives_restart(als, deployment, pmd, smd):
    populate(als, pmd, 1)
    fiscal = make_identity(1).fiscal_code
    (tid,) = als.delegate_offer(pmd.token, [{"fiscal_code": fiscal}], smd.name)
    (offer,) = als.inbox(smd.token)
    als.accept_ticket(smd.token, tid, add_layer(offer.payload, smd.key, rng=smd.rng))

    from nusa.deployment import Deployment

    reborn = Deployment(deployment.config, clock=als._clock)
    reborn.als.enroll("pmd1", "cred-pmd1", "MD", key_id=pmd.key.key_id)
    reborn.als.enroll("smd1", "cred-smd1", "MD", key_id=smd.key.key_id)
    token = reborn.als.authenticate("pmd1", "cred-pmd1").token
    (accepted,) = reborn.als.pmd_inbox(token)
    assert accepted.ticket_id == tid
    reborn.als.complete_ticket(token, tid, remove_layer(accepted.payload, pmd.key))
    smd_token = reborn.als.authenticate("smd1", "cred-smd1").token
    epid, _, _ = reborn.als.query_patient_epid(smd_token, {"fiscal_code": fiscal})
    assert epid.layers[0].key_id == smd.key.key_id
