"""Aggregation and Login Server.

The trusted conduit between terminals and the two store kinds. It
authenticates principals, routes every protocol flow, and queues the staged
delegation / patient-access tickets. It holds no decryption keys, so it can
verify only layer *metadata* on submitted ciphertexts, never bodies; a client
that submits a corrupted body produces a grant that decrypts to a garbage PID
and fails downstream, which is a documented failure mode rather than a bug.

Persistence discipline: nothing the server writes may associate a patient
identity with a PID. The operations log therefore records no arguments, and
the ticket journal contains only principal ids, record ids and ciphertexts.
"""

from __future__ import annotations

import hmac
import json
import logging
import random
import secrets
import statistics
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from ..crypto_core import LayeredCiphertext, ObfuscatedBlob, PatientIdentifier
from ..ehr_store import EHRStore, MedicalRecord, RecordView
from ..errors import (
    AuthFailed,
    DuplicateTicket,
    InvalidGrant,
    InvalidInput,
    InvalidPayload,
    InvalidStage,
    NoData,
    NotAuthorized,
    NotFound,
    SessionExpired,
)
from ..patient_registry import (
    ROLE_PATIENT,
    ROLE_PMD,
    ROLE_SMD,
    AccessGrant,
    Identity,
    PatientRegistry,
    Window,
)

log = logging.getLogger("nusa.als")

SESSION_LIFETIME = 1800.0  # seconds, renewable

STAGE_OFFERED = "OFFERED"
STAGE_ACCEPTED = "ACCEPTED"
STAGE_COMPLETED = "COMPLETED"

KIND_DELEGATION = "delegation"
KIND_ACCESS = "access"


@dataclass
class Principal:
    principal_id: str
    credential: str
    role: str  # "MD" | "PATIENT"


@dataclass
class Session:
    principal_id: str
    role: str
    token: str
    expiry: float


@dataclass
class Ticket:
    """Staged handshake state shared by delegation and patient access.

    grantee is the SMD for delegation tickets and the patient for access
    tickets. payload carries the evolving layered ciphertext: the PMD's EPID
    at OFFERED (one layer), the doubly-encrypted EEPID at ACCEPTED (two
    layers).
    """

    ticket_id: int
    kind: str
    pmd_id: str
    grantee_id: str
    record_id: int
    stage: str
    payload: LayeredCiphertext

    def to_dict(self) -> dict:
        return {
            "ticket_id": self.ticket_id,
            "kind": self.kind,
            "pmd": self.pmd_id,
            "grantee": self.grantee_id,
            "record_id": self.record_id,
            "stage": self.stage,
            "payload": self.payload.hex,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ticket":
        try:
            return cls(
                int(d["ticket_id"]),
                d["kind"],
                d["pmd"],
                d["grantee"],
                int(d["record_id"]),
                d["stage"],
                LayeredCiphertext.from_hex(d["payload"]),
            )
        except KeyError as exc:
            raise InvalidInput(f"ticket journal entry missing {exc}") from exc


class AggregationLoginServer:
    def __init__(
        self,
        registry: PatientRegistry,
        stores: Sequence[EHRStore],
        key_directory: dict[str, bytes],
        state_dir: str | Path,
        *,
        clock: Callable[[], float] = time.time,
        rng: random.Random | None = None,
        session_lifetime: float = SESSION_LIFETIME,
    ):
        self.registry = registry
        self.stores = list(stores)
        self._keys = key_directory
        self._clock = clock
        self._rng = rng
        self._session_lifetime = session_lifetime
        self._principals: dict[str, Principal] = {}
        self._sessions: dict[str, Session] = {}
        self._tickets: dict[int, Ticket] = {}
        self._next_ticket = 1
        self._lock = threading.RLock()
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        self._oplog_path = state_dir / "als_ops.log"
        self._ticket_journal = state_dir / "als_tickets.jsonl"
        # sessions that already ran removal stage 1; lets the server warn on
        # out-of-order stage 2 without ever linking the EPID to a PID
        self._stage1_sessions: set[str] = set()
        if self._ticket_journal.exists():
            self._load_tickets()

    def _load_tickets(self) -> None:
        """Rebuild ticket state from the journal; the last line per ticket
        wins, so stage transitions replay naturally."""
        with self._ticket_journal.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                ticket = Ticket.from_dict(json.loads(line))
                self._tickets[ticket.ticket_id] = ticket
        if self._tickets:
            self._next_ticket = max(self._tickets) + 1

    # -- provisioning (out-of-band in a real deployment) --------------------

    def enroll(self, principal_id: str, credential: str, role: str, key_id: bytes | None = None) -> None:
        if role not in ("MD", "PATIENT"):
            raise InvalidInput(f"unknown principal role {role!r}")
        with self._lock:
            self._principals[principal_id] = Principal(principal_id, credential, role)
            if key_id is not None:
                self._keys[principal_id] = key_id

    def register_key_id(self, principal_id: str, key_id: bytes) -> None:
        with self._lock:
            self._keys[principal_id] = key_id

    # -- sessions -----------------------------------------------------------

    def authenticate(self, principal_id: str, credential: str) -> Session:
        with self._lock:
            principal = self._principals.get(principal_id)
            supplied = credential.encode("utf-8")
            stored = principal.credential.encode("utf-8") if principal else b""
            # compare even for unknown principals so timing does not leak enrollment
            if not hmac.compare_digest(supplied, stored) or principal is None:
                self._log_op("authenticate", principal_id, "AuthFailed")
                raise AuthFailed("bad principal or credential")
            token = self._random_bytes(16).hex()
            session = Session(principal_id, principal.role, token, self._clock() + self._session_lifetime)
            self._sessions[token] = session
            self._log_op("authenticate", principal_id, "ok")
            return session

    def renew(self, token: str) -> Session:
        with self._lock:
            session = self._require(token)
            session.expiry = self._clock() + self._session_lifetime
            return session

    def _require(self, token: str, role: str | None = None) -> Session:
        session = self._sessions.get(token)
        if session is None:
            raise SessionExpired("unknown session token")
        if session.expiry < self._clock():
            del self._sessions[token]
            raise SessionExpired("session expired")
        if role is not None and session.role != role:
            raise NotAuthorized(f"operation requires a {role} session")
        return session

    def _random_bytes(self, n: int) -> bytes:
        if self._rng is not None:
            return self._rng.randbytes(n)
        return secrets.token_bytes(n)

    # -- database population (first protocol flow) ---------------------------

    def populate(
        self,
        token: str,
        identity: Identity,
        epid: LayeredCiphertext,
        pid: PatientIdentifier,
        clear_fields: Mapping[str, object] | None = None,
        obfuscated_fields: Mapping[str, object] | None = None,
        store_indexes: Sequence[int] = (0,),
    ) -> int:
        """Create the registry entry (caller as PMD) and the EHR records.

        Two-phase: the registry entry is rolled back if any EHR insert fails,
        so a duplicate fiscal code or pid never leaves a partial population.
        The (identity, pid) pair crosses this call transiently and is never
        written anywhere together.
        """
        session = self._require(token, role="MD")
        self._check_single_layer_by(epid, session.principal_id)
        grant = AccessGrant(session.principal_id, ROLE_PMD, epid)
        with self._lock:
            record_id = self.registry.create_entry(identity, grant)
            inserted: list[int] = []
            try:
                blobs = {
                    name: blob if isinstance(blob, ObfuscatedBlob) else ObfuscatedBlob.from_dict(blob)
                    for name, blob in (obfuscated_fields or {}).items()
                }
                for idx in store_indexes:
                    self._store(idx).insert(
                        MedicalRecord(pid, dict(clear_fields or {}), dict(blobs))
                    )
                    inserted.append(idx)
            except Exception:
                for idx in inserted:
                    self._store(idx).remove_by_pid(pid)
                self.registry.remove_entry(record_id)
                self._log_op("populate", session.principal_id, "rolled_back")
                raise
        self._log_op("populate", session.principal_id, "ok")
        return record_id

    def _store(self, idx: int) -> EHRStore:
        try:
            return self.stores[idx]
        except IndexError:
            raise NotFound(f"no EHR store {idx}")

    # -- patient query flow ---------------------------------------------------

    def query_patient_epid(self, token: str, query: Mapping[str, str]) -> tuple[LayeredCiphertext, Identity, int]:
        """The caller's own EPID for the queried patient, plus the registry
        identity (the caller is entitled to the PR-side demographics: they are
        what the obfuscation key is derived from)."""
        session = self._require(token)
        grant = self.registry.lookup_grant(query, session.principal_id, self._clock())
        record = self.registry.find_record(query)
        self._log_op("query_epid", session.principal_id, "ok")
        return grant.epid, record.identity, record.record_id

    def fetch_records(self, token: str, pid: PatientIdentifier) -> list[tuple[str, RecordView]]:
        """Visibility-filtered views from every store holding the pid."""
        session = self._require(token)
        views = []
        for store in self.stores:
            try:
                views.append((store.name, store.query_by_pid(pid, session.principal_id)))
            except NotFound:
                continue
        if not views:
            raise NotFound("no store holds this pid")
        self._log_op("fetch_records", session.principal_id, "ok")
        return views

    # -- record mutation (PMD and SMDs may write) ------------------------------

    def update_record(
        self,
        token: str,
        pid: PatientIdentifier,
        clear_deltas: Mapping[str, object] | None = None,
        obfuscated_deltas: Mapping[str, object] | None = None,
    ) -> int:
        session = self._require(token, role="MD")
        blobs = {
            name: blob if isinstance(blob, ObfuscatedBlob) else ObfuscatedBlob.from_dict(blob)
            for name, blob in (obfuscated_deltas or {}).items()
        }
        touched = 0
        for store in self.stores:
            if store.has_pid(pid):
                store.update(pid, clear_deltas, blobs)
                touched += 1
        if not touched:
            raise NotFound("no store holds this pid")
        self._log_op("update_record", session.principal_id, "ok")
        return touched

    def replace_record(self, token: str, pid: PatientIdentifier, record: MedicalRecord) -> int:
        session = self._require(token, role="MD")
        touched = 0
        for store in self.stores:
            if store.has_pid(pid):
                store.replace(pid, record)
                touched += 1
        if not touched:
            raise NotFound("no store holds this pid")
        self._log_op("replace_record", session.principal_id, "ok")
        return touched

    def attach_legacy(self, token: str, store_index: int, query: Mapping[str, object], pid: PatientIdentifier) -> int:
        session = self._require(token, role="MD")
        count = self._store(store_index).attach_pid_to_legacy(query, pid)
        self._log_op("attach_legacy", session.principal_id, "ok")
        return count

    def keyword_search(self, token: str, terms: Iterable[str]) -> list[tuple[str, PatientIdentifier, str]]:
        session = self._require(token)
        out = []
        for store in self.stores:
            for pid, fname in store.keyword_search(terms, session.principal_id):
                out.append((store.name, pid, fname))
        self._log_op("keyword_search", session.principal_id, "ok")
        return out

    def stats(self, token: str, fname: str, statistic: str, store_index: int | None = None) -> float:
        session = self._require(token, role="MD")
        self._log_op("stats", session.principal_id, "ok")
        if store_index is not None:
            return self._store(store_index).stats(fname, statistic)
        values: list[float] = []
        for store in self.stores:
            values.extend(store.numeric_values(fname))
        if not values:
            raise NoData(f"no numeric values for field {fname!r}")
        if statistic == "mean":
            return statistics.fmean(values)
        if statistic == "variance":
            return statistics.pvariance(values)
        if statistic == "count":
            return float(len(values))
        raise InvalidInput(f"unknown statistic {statistic!r}")

    def list_patients(self, token: str) -> list[tuple[int, Identity, AccessGrant]]:
        session = self._require(token)
        self._log_op("list_patients", session.principal_id, "ok")
        return self.registry.list_patients_of(session.principal_id, self._clock())

    # -- delegation flow (staged tickets) --------------------------------------

    def delegate_offer(self, token: str, queries: Sequence[Mapping[str, str]], smd_id: str) -> list[int]:
        """One OFFERED ticket per patient, payload = the PMD's own EPID."""
        session = self._require(token, role="MD")
        if smd_id not in self._principals or self._principals[smd_id].role != "MD":
            raise NotFound(f"no enrolled MD {smd_id!r}")
        ticket_ids = []
        with self._lock:
            for query in queries:
                record = self.registry.find_record(query)
                grant = record.grant_for(session.principal_id)
                if grant is None or grant.role != ROLE_PMD:
                    raise NotAuthorized("caller is not the PMD of this patient")
                self._check_no_pending(record.record_id, smd_id, KIND_DELEGATION)
                ticket_ids.append(
                    self._new_ticket(KIND_DELEGATION, session.principal_id, smd_id, record.record_id, grant.epid)
                )
        self._log_op("delegate_offer", session.principal_id, "ok")
        return ticket_ids

    def inbox(self, token: str) -> list[Ticket]:
        """OFFERED tickets addressed to the caller (SMD or patient side)."""
        session = self._require(token)
        with self._lock:
            return [
                self._copy_ticket(t)
                for t in sorted(self._tickets.values(), key=lambda t: t.ticket_id)
                if t.grantee_id == session.principal_id and t.stage == STAGE_OFFERED
            ]

    def pmd_inbox(self, token: str) -> list[Ticket]:
        """ACCEPTED tickets waiting for the PMD to finalize."""
        session = self._require(token, role="MD")
        with self._lock:
            return [
                self._copy_ticket(t)
                for t in sorted(self._tickets.values(), key=lambda t: t.ticket_id)
                if t.pmd_id == session.principal_id and t.stage == STAGE_ACCEPTED
            ]

    def accept_ticket(self, token: str, ticket_id: int, eepid: LayeredCiphertext) -> None:
        """Grantee accepts: payload must be the offered EPID plus exactly one
        new layer keyed by the caller. Only metadata is verifiable here."""
        session = self._require(token)
        with self._lock:
            ticket = self._get_ticket(ticket_id)
            if ticket.grantee_id != session.principal_id:
                raise NotAuthorized("ticket is not addressed to caller")
            if ticket.stage != STAGE_OFFERED:
                raise InvalidStage(f"ticket is {ticket.stage}, not OFFERED")
            base = ticket.payload
            if eepid.layer_count != base.layer_count + 1:
                raise InvalidPayload("accepted payload must add exactly one layer")
            if eepid.layers[: base.layer_count] != base.layers:
                raise InvalidPayload("accepted payload must preserve the offered layers")
            expected = self._keys.get(session.principal_id)
            if expected is None or eepid.layers[-1].key_id != expected:
                raise InvalidPayload("added layer is not keyed by the caller")
            ticket.payload = eepid
            ticket.stage = STAGE_ACCEPTED
            self._journal_ticket(ticket)
        self._log_op("accept_ticket", session.principal_id, "ok")

    def complete_ticket(
        self,
        token: str,
        ticket_id: int,
        grantee_epid: LayeredCiphertext,
        windows: Sequence[Window] = (),
        pid: PatientIdentifier | None = None,
    ) -> None:
        """PMD finalizes: stores the grantee-keyed EPID as a new grant.

        For access tickets the PMD also supplies the pid (known from his
        master terminal) so the stores can be stamped with the pseudonymous
        patient owner; that stamp is what later authorizes visibility changes.
        """
        session = self._require(token, role="MD")
        with self._lock:
            ticket = self._get_ticket(ticket_id)
            if ticket.pmd_id != session.principal_id:
                raise NotAuthorized("ticket does not belong to caller")
            if ticket.stage != STAGE_ACCEPTED:
                raise InvalidStage(f"ticket is {ticket.stage}, not ACCEPTED")
            try:
                self._check_single_layer_by(grantee_epid, ticket.grantee_id)
            except InvalidGrant as exc:
                raise InvalidPayload(str(exc)) from exc
            role = ROLE_SMD if ticket.kind == KIND_DELEGATION else ROLE_PATIENT
            grant = AccessGrant(ticket.grantee_id, role, grantee_epid, tuple(windows))
            self.registry.add_grant(ticket.record_id, grant)
            ticket.stage = STAGE_COMPLETED
            self._journal_ticket(ticket)
            if ticket.kind == KIND_ACCESS and pid is not None:
                for store in self.stores:
                    if store.has_pid(pid):
                        store.set_patient_owner(pid, ticket.grantee_id)
        self._log_op("complete_ticket", session.principal_id, "ok")

    def _check_no_pending(self, record_id: int, grantee_id: str, kind: str) -> None:
        for t in self._tickets.values():
            if (
                t.kind == kind
                and t.record_id == record_id
                and t.grantee_id == grantee_id
                and t.stage in (STAGE_OFFERED, STAGE_ACCEPTED)
            ):
                raise DuplicateTicket("a pending ticket already exists for this pair")

    def _new_ticket(
        self, kind: str, pmd_id: str, grantee_id: str, record_id: int, payload: LayeredCiphertext
    ) -> int:
        ticket = Ticket(self._next_ticket, kind, pmd_id, grantee_id, record_id, STAGE_OFFERED, payload)
        self._next_ticket += 1
        self._tickets[ticket.ticket_id] = ticket
        self._journal_ticket(ticket)
        return ticket.ticket_id

    def _get_ticket(self, ticket_id: int) -> Ticket:
        ticket = self._tickets.get(ticket_id)
        if ticket is None:
            raise NotFound(f"no ticket {ticket_id}")
        return ticket

    @staticmethod
    def _copy_ticket(t: Ticket) -> Ticket:
        return Ticket(t.ticket_id, t.kind, t.pmd_id, t.grantee_id, t.record_id, t.stage, t.payload)

    # -- patient access flow -----------------------------------------------------

    def request_access(self, token: str, query: Mapping[str, str]) -> int:
        """Patient subscribes: an OFFERED access ticket carrying the PMD's
        EPID is queued to the patient, mirroring the delegation offer."""
        session = self._require(token, role="PATIENT")
        with self._lock:
            record = self.registry.find_record(query)
            pmd_grant = record.pmd_grant()
            self._check_no_pending(record.record_id, session.principal_id, KIND_ACCESS)
            ticket_id = self._new_ticket(
                KIND_ACCESS, pmd_grant.principal_id, session.principal_id, record.record_id, pmd_grant.epid
            )
        self._log_op("request_access", session.principal_id, "ok")
        return ticket_id

    # -- patient removal (two stages) ----------------------------------------------

    def remove_patient_stage1(self, token: str, pid: PatientIdentifier) -> int:
        """Remove the medical records; the registry entry survives stage 1."""
        session = self._require(token, role="MD")
        removed = 0
        for store in self.stores:
            if store.has_pid(pid):
                store.remove_by_pid(pid)
                removed += 1
        self._stage1_sessions.add(token)
        self._log_op("remove_stage1", session.principal_id, "ok")
        return removed

    def remove_patient_stage2(self, token: str, epid: LayeredCiphertext) -> int:
        """Remove the registry entry located via the caller's EPID, taking
        every grant (SMDs, patient) with it."""
        session = self._require(token, role="MD")
        if token not in self._stage1_sessions:
            log.warning("removal stage 2 before stage 1 in session of %s", session.principal_id)
        record = self.registry.find_by_grant_epid(session.principal_id, epid)
        if record.grant_for(session.principal_id).role != ROLE_PMD:
            raise NotAuthorized("only the PMD removes patients")
        self.registry.remove_entry(record.record_id)
        self._log_op("remove_stage2", session.principal_id, "ok")
        return record.record_id

    # -- key-loss recovery ------------------------------------------------------------

    def recover_pmd_key(
        self, token: str, replacements: Sequence[tuple[LayeredCiphertext, LayeredCiphertext]]
    ) -> tuple[int, list[str]]:
        """Swap (old EPID -> new EPID) on the caller's PMD grants.

        Partial results are allowed: stale old EPIDs are reported, not fatal.
        All new EPIDs must share one key id, which becomes the caller's
        registered key.
        """
        session = self._require(token, role="MD")
        if not replacements:
            return 0, []
        new_key_ids = {new.layers[0].key_id for _, new in replacements if new.layer_count == 1}
        if len(new_key_ids) != 1:
            raise InvalidPayload("all replacement EPIDs must be single-layer under one key")
        replaced = 0
        errors: list[str] = []
        with self._lock:
            self._keys[session.principal_id] = next(iter(new_key_ids))
            for old, new in replacements:
                try:
                    record = self.registry.find_by_grant_epid(session.principal_id, old)
                    grant = record.grant_for(session.principal_id)
                    if grant.role != ROLE_PMD:
                        raise InvalidGrant("replacement targets a non-PMD grant")
                    self.registry.replace_grant_epid(record.record_id, session.principal_id, new)
                    replaced += 1
                except (NotFound, InvalidGrant) as exc:
                    errors.append(f"{old.hex[:16]}…: {exc.code}")
        self._log_op("recover_pmd_key", session.principal_id, "ok")
        return replaced, errors

    def recover_smd_key(self, token: str, new_key_id: bytes) -> tuple[int, list[int]]:
        """SMD lost its key: revoke every grant it held and queue fresh offers
        from each responsible PMD so delegation can be re-completed."""
        session = self._require(token)
        smd_id = session.principal_id
        revoked = 0
        ticket_ids: list[int] = []
        with self._lock:
            self._keys[smd_id] = new_key_id
            for record in self.registry.all_records():
                grant = record.grant_for(smd_id)
                if grant is None or grant.role != ROLE_SMD:
                    continue
                pmd_grant = record.pmd_grant()
                self.registry.revoke_grant(record.record_id, smd_id)
                revoked += 1
                ticket_ids.append(
                    self._new_ticket(KIND_DELEGATION, pmd_grant.principal_id, smd_id, record.record_id, pmd_grant.epid)
                )
        self._log_op("recover_smd_key", smd_id, "ok")
        return revoked, ticket_ids

    # -- patient-controlled visibility ---------------------------------------------------

    def set_obfuscation_visibility(
        self, token: str, pid: PatientIdentifier, fname: str, md_id: str, hidden: bool
    ) -> None:
        """Patients only, and only on records stamped as their own."""
        session = self._require(token, role="PATIENT")
        touched = 0
        for store in self.stores:
            if not store.has_pid(pid):
                continue
            if store.patient_owner_of(pid) != session.principal_id:
                raise NotAuthorized("record does not belong to this patient")
            store.set_visibility(pid, fname, md_id, hidden)
            touched += 1
        if not touched:
            raise NotFound("no store holds this pid")
        self._log_op("set_visibility", session.principal_id, "ok")

    # -- verification helpers ------------------------------------------------------------

    def _check_single_layer_by(self, ct: LayeredCiphertext, principal_id: str) -> None:
        if ct.layer_count != 1:
            raise InvalidGrant("EPID must carry exactly one layer")
        expected = self._keys.get(principal_id)
        if expected is None or ct.layers[0].key_id != expected:
            raise InvalidGrant(f"EPID is not keyed by {principal_id!r}")

    # -- maintenance ----------------------------------------------------------------------

    def sweep_expired(self, token: str | None = None) -> int:
        """Purge expired grants. The background daemon calls this directly;
        over the wire it needs an MD session."""
        if token is not None:
            self._require(token, role="MD")
        return self.registry.sweep_expired(self._clock())

    def now(self) -> float:
        return self._clock()

    # -- persistence --------------------------------------------------------------------

    def _log_op(self, op: str, principal: str, status: str) -> None:
        # deliberately argument-free: no identity and no pid ever reaches this log
        entry = {"ts": self._clock(), "op": op, "principal": principal, "status": status}
        with self._oplog_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _journal_ticket(self, ticket: Ticket) -> None:
        with self._ticket_journal.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(ticket.to_dict(), sort_keys=True) + "\n")
