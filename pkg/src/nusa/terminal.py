"""Terminal emulators: the client side of every protocol flow.

A terminal is where the secrets live. MD terminals hold the doctor's
layer key; the *master* terminal additionally owns the local patient
database associating each identity with its clear PID and a cached copy
of the medical records, which makes it the only place population,
removal and key regeneration can start. Slave terminals are stateless
beyond the key store: they are provisioned with the same key and work
purely against the servers, holding no identity/PID association at
rest. Patient terminals hold the patient's own key and, once the
access flow has completed, their own PID.

Everything a terminal persists is sealed under a passphrase, so a
filesystem scan of a terminal's state file shows neither identities nor
PIDs in clear.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import random
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .als.wire import ProtocolClient
from .crypto_core import (
    NONCE_LEN,
    LayeredCiphertext,
    ObfuscatedBlob,
    ObfuscationKey,
    PatientIdentifier,
    SecretKey,
    add_layer,
    derive_obfuscation_key,
    deobfuscate,
    generate_key,
    generate_pid,
    keystream,
    obfuscate,
    remove_layer,
    wrap_pid,
)
from .errors import AuthFailed, InvalidInput, NusaError, RequiresMasterTerminal
from .patient_registry import Identity, Window

KIND_MASTER = "master"
KIND_SLAVE = "slave"
KIND_PATIENT = "patient"

REASON_PMD_LOSS = "pmd-loss"
REASON_SMD_LOSS = "smd-loss"

# Local file lock, not a proof-of-work target; far lighter than the
# obfuscation-key chain.
LOCAL_KDF_ITERATIONS = 4096

_STATE_MAGIC = "nusa-terminal-state"
_SALT_LEN = 16


def _rand(n: int, rng: random.Random | None) -> bytes:
    if rng is not None:
        return rng.randbytes(n)
    return secrets.token_bytes(n)


class TerminalStore:
    """Passphrase-sealed JSON state file.

    Sealed layout: salt (16) | nonce (16) | keystream-XORed payload |
    HMAC-SHA256 (32). The MAC key is derived from the encryption key, so a
    wrong passphrase fails the tag check instead of yielding silently
    corrupt JSON.
    """

    def __init__(
        self,
        path: str | Path,
        passphrase: str,
        *,
        iterations: int = LOCAL_KDF_ITERATIONS,
        rng: random.Random | None = None,
    ):
        if not passphrase:
            raise InvalidInput("terminal passphrase must be non-empty")
        self.path = Path(path)
        self._passphrase = passphrase
        self._iterations = iterations
        self._rng = rng

    def _keys(self, salt: bytes) -> tuple[bytes, bytes]:
        okey = derive_obfuscation_key(self._passphrase, salt, self._iterations)
        mac_key = hashlib.sha256(okey.key_bytes + b"|mac").digest()
        return okey.key_bytes, mac_key

    def seal(self, data: bytes) -> bytes:
        salt = _rand(_SALT_LEN, self._rng)
        nonce = _rand(NONCE_LEN, self._rng)
        enc_key, mac_key = self._keys(salt)
        ct = bytes(a ^ b for a, b in zip(data, keystream(enc_key, nonce, len(data))))
        blob = salt + nonce + ct
        return blob + hmac.new(mac_key, blob, hashlib.sha256).digest()

    def unseal(self, blob: bytes) -> bytes:
        if len(blob) < _SALT_LEN + NONCE_LEN + 32:
            raise AuthFailed("sealed blob is truncated")
        salt = blob[:_SALT_LEN]
        nonce = blob[_SALT_LEN : _SALT_LEN + NONCE_LEN]
        ct, tag = blob[_SALT_LEN + NONCE_LEN : -32], blob[-32:]
        enc_key, mac_key = self._keys(salt)
        if not hmac.compare_digest(hmac.new(mac_key, blob[:-32], hashlib.sha256).digest(), tag):
            raise AuthFailed("wrong passphrase or corrupted data")
        return bytes(a ^ b for a, b in zip(ct, keystream(enc_key, nonce, len(ct))))

    def load(self) -> dict | None:
        if not self.path.exists():
            return None
        state = json.loads(self.unseal(self.path.read_bytes()).decode("utf-8"))
        if state.get("magic") != _STATE_MAGIC:
            raise AuthFailed("not a terminal state file")
        return state

    def save(self, state: dict) -> None:
        state = dict(state, magic=_STATE_MAGIC)
        blob = self.seal(json.dumps(state, sort_keys=True).encode("utf-8"))
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, self.path)


@dataclass
class LocalPatientEntry:
    """One row of the master terminal's local patient database.

    cache mirrors the store-side records (per store name, wire shape);
    the dirty maps hold local edits made offline, pushed at the next sync.
    """

    record_id: int
    identity: Identity
    pid: PatientIdentifier | None = None
    cache: dict[str, dict] = field(default_factory=dict)
    dirty_clear: dict[str, Any] = field(default_factory=dict)
    dirty_private: dict[str, str] = field(default_factory=dict)
    dirty_keywords: dict[str, list[str]] = field(default_factory=dict)

    @property
    def dirty(self) -> bool:
        return bool(self.dirty_clear or self.dirty_private)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "identity": self.identity.to_dict(),
            "pid": self.pid.hex if self.pid else None,
            "cache": self.cache,
            "dirty_clear": self.dirty_clear,
            "dirty_private": self.dirty_private,
            "dirty_keywords": self.dirty_keywords,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocalPatientEntry":
        pid = d.get("pid")
        return cls(
            d["record_id"],
            Identity.from_dict(d["identity"]),
            PatientIdentifier.from_hex(pid) if pid else None,
            dict(d.get("cache", {})),
            dict(d.get("dirty_clear", {})),
            dict(d.get("dirty_private", {})),
            {k: list(v) for k, v in d.get("dirty_keywords", {}).items()},
        )


@dataclass
class DecryptedRecord:
    """A fetched record with the obfuscated fields opened locally."""

    store: str
    clear_fields: dict[str, Any]
    private_fields: dict[str, str]
    undecryptable: list[str] = field(default_factory=list)


class Terminal:
    """One emulated client device bound to one principal.

    The aggregation server never sees key bytes or clear PIDs through any
    method here: layers are added/removed locally and only layered
    ciphertexts (or, for the stores, PIDs without identities) go out.
    """

    def __init__(
        self,
        client: ProtocolClient,
        store: TerminalStore,
        *,
        kind: str = KIND_MASTER,
        obfuscation_salt: bytes = b"",
        obfuscation_iterations: int = 0,
        rng: random.Random | None = None,
    ):
        if kind not in (KIND_MASTER, KIND_SLAVE, KIND_PATIENT):
            raise InvalidInput(f"unknown terminal kind {kind!r}")
        self.client = client
        self.store = store
        self.kind = kind
        self._salt = obfuscation_salt
        self._obf_iterations = obfuscation_iterations
        self._rng = rng
        self.principal: str | None = None
        self._credential: str | None = None
        self.key: SecretKey | None = None
        self.previous_keys: list[SecretKey] = []
        self.entries: dict[int, LocalPatientEntry] = {}
        self.own_identity: Identity | None = None
        self.own_pid: PatientIdentifier | None = None
        loaded = store.load()
        if loaded is not None:
            self._from_state(loaded)

    # -- local state ---------------------------------------------------------

    def _from_state(self, state: dict) -> None:
        self.kind = state.get("kind", self.kind)
        self.principal = state.get("principal")
        self._credential = state.get("credential")
        key_hex = state.get("key")
        self.key = SecretKey(bytes.fromhex(key_hex)) if key_hex else None
        self.previous_keys = [SecretKey(bytes.fromhex(k)) for k in state.get("previous_keys", [])]
        self.entries = {
            e["record_id"]: LocalPatientEntry.from_dict(e) for e in state.get("entries", [])
        }
        ident = state.get("identity")
        self.own_identity = Identity.from_dict(ident) if ident else None
        pid = state.get("pid")
        self.own_pid = PatientIdentifier.from_hex(pid) if pid else None

    def _state(self) -> dict:
        state = {
            "kind": self.kind,
            "principal": self.principal,
            "credential": self._credential,
            "key": self.key.key_bytes.hex() if self.key else None,
            "previous_keys": [k.key_bytes.hex() for k in self.previous_keys],
            "identity": self.own_identity.to_dict() if self.own_identity else None,
            "pid": self.own_pid.hex if self.own_pid else None,
        }
        # only the master persists the identity/PID database; slaves stay
        # stateless beyond the key store
        if self.kind == KIND_MASTER:
            state["entries"] = [
                e.to_dict() for e in sorted(self.entries.values(), key=lambda e: e.record_id)
            ]
        return state

    def save(self) -> None:
        self.store.save(self._state())

    def provision(
        self,
        principal: str,
        credential: str,
        *,
        key: SecretKey | None = None,
        identity: Identity | None = None,
    ) -> SecretKey:
        """First-run setup: bind the principal and set or mint the layer key.

        Slave terminals are provisioned with the master's existing key
        (passed in); master and patient terminals usually mint a fresh one.
        """
        self.principal = principal
        self._credential = credential
        self.key = key or generate_key(self._rng)
        if identity is not None:
            self.own_identity = identity
        self.save()
        return self.key

    def login(self) -> dict:
        if not self.principal or self._credential is None:
            raise InvalidInput("terminal is not provisioned")
        return self.client.login(self.principal, self._credential)

    def _need_key(self) -> SecretKey:
        if self.key is None:
            raise InvalidInput("terminal holds no layer key")
        return self.key

    def _okey_for(self, identity: Identity) -> ObfuscationKey:
        if not self._salt or self._obf_iterations < 1:
            raise InvalidInput("terminal lacks the deployment obfuscation parameters")
        return derive_obfuscation_key(identity.canonical_string(), self._salt, self._obf_iterations)

    def _obfuscate_fields(
        self,
        identity: Identity,
        private_fields: Mapping[str, str],
        keywords: Mapping[str, Sequence[str]] | None,
    ) -> dict[str, dict]:
        okey = self._okey_for(identity)
        out = {}
        for name, value in private_fields.items():
            kw = tuple((keywords or {}).get(name, ()))
            out[name] = obfuscate(str(value).encode("utf-8"), okey, kw, rng=self._rng).to_dict()
        return out

    # -- population (master terminal) -----------------------------------------

    def populate_patient(
        self,
        identity: Identity,
        clear_fields: Mapping[str, Any] | None = None,
        private_fields: Mapping[str, str] | None = None,
        keywords: Mapping[str, Sequence[str]] | None = None,
        stores: Sequence[int | str] = (0,),
    ) -> int:
        """Mint a PID, encrypt it into this MD's EPID, obfuscate the private
        fields under the patient-derived key, and push everything up.

        The identity/PID association is recorded only here, in the local
        sealed database.
        """
        if self.kind != KIND_MASTER:
            raise RequiresMasterTerminal("population runs on the master terminal")
        key = self._need_key()
        pid = generate_pid(self._rng)
        epid = add_layer(wrap_pid(pid), key, rng=self._rng)
        blobs = self._obfuscate_fields(identity, private_fields or {}, keywords)
        args = {
            "identity": identity.to_dict(),
            "epid": epid.hex,
            "pid": pid.hex,
            "clear": dict(clear_fields or {}),
            "obfuscated": blobs,
            "stores": list(stores),
        }
        record_id = self.client.call("populate", args)["record_id"]
        entry = LocalPatientEntry(record_id, identity, pid)
        entry.cache = self._fetch_snapshot(pid)
        self.entries[record_id] = entry
        self.save()
        return record_id

    def master_populate(self, path: str | Path, default_stores: Sequence[int | str] = (0,)) -> list[dict]:
        """Batch import from a line-delimited JSON file, one patient per line:
        {"identity": {...}, "clear": {...}, "private": {...}, "keywords":
        {...}, "stores": [...]}.

        Per-item failures (duplicate fiscal code, leaky field names) are
        collected, not fatal; re-running an import is safe.
        """
        results = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                fiscal = row.get("identity", {}).get("fiscal_code")
                try:
                    record_id = self.populate_patient(
                        Identity.from_dict(row["identity"]),
                        row.get("clear"),
                        row.get("private"),
                        row.get("keywords"),
                        stores=row.get("stores", list(default_stores)),
                    )
                    results.append({"fiscal_code": fiscal, "ok": True, "record_id": record_id})
                except NusaError as exc:
                    results.append({"fiscal_code": fiscal, "ok": False, "error": exc.code})
        return results

    # -- lookup ----------------------------------------------------------------

    def lookup_patient(self, query: Mapping[str, str]) -> dict:
        """Full round trip: registry EPID -> local decrypt -> store fetch ->
        local deobfuscation. Returns identity, pid and per-store records."""
        key = self._need_key()
        got = self.client.call("query_patient_epid", {"query": dict(query)})
        epid = LayeredCiphertext.from_hex(got["epid"])
        opened = remove_layer(epid, key)
        if opened.layer_count != 0:
            raise InvalidInput("grant EPID still has foreign layers after decryption")
        pid = PatientIdentifier(opened.body)
        identity = Identity.from_dict(got["identity"])
        records = self._fetch_and_open(pid, identity)
        return {
            "record_id": got["record_id"],
            "identity": identity,
            "pid": pid,
            "records": records,
        }

    def _fetch_and_open(self, pid: PatientIdentifier, identity: Identity) -> list[DecryptedRecord]:
        fetched = self.client.call("fetch_records", {"pid": pid.hex})
        okey = self._okey_for(identity)
        out = []
        for rec in fetched["records"]:
            private: dict[str, str] = {}
            bad: list[str] = []
            for name, blob_dict in rec["obfuscated"].items():
                blob = ObfuscatedBlob.from_dict(blob_dict)
                try:
                    private[name] = deobfuscate(blob, okey).decode("utf-8")
                except UnicodeDecodeError:
                    bad.append(name)
            out.append(DecryptedRecord(rec["store"], dict(rec["clear"]), private, bad))
        return out

    def _fetch_snapshot(self, pid: PatientIdentifier) -> dict[str, dict]:
        fetched = self.client.call("fetch_records", {"pid": pid.hex})
        return {
            r["store"]: {"clear": r["clear"], "obfuscated": r["obfuscated"]}
            for r in fetched["records"]
        }

    def update_patient(
        self,
        query: Mapping[str, str],
        clear_fields: Mapping[str, Any] | None = None,
        private_fields: Mapping[str, str] | None = None,
        keywords: Mapping[str, Sequence[str]] | None = None,
    ) -> int:
        """Immediate (online) field update on every store holding the patient."""
        key = self._need_key()
        got = self.client.call("query_patient_epid", {"query": dict(query)})
        pid = PatientIdentifier(remove_layer(LayeredCiphertext.from_hex(got["epid"]), key).body)
        identity = Identity.from_dict(got["identity"])
        blobs = self._obfuscate_fields(identity, private_fields or {}, keywords) if private_fields else {}
        reply = self.client.call(
            "update_record",
            {"pid": pid.hex, "clear": dict(clear_fields or {}), "obfuscated": blobs},
        )
        return reply["stores"]

    def edit_local(
        self,
        fiscal_code: str,
        clear_fields: Mapping[str, Any] | None = None,
        private_fields: Mapping[str, str] | None = None,
        keywords: Mapping[str, Sequence[str]] | None = None,
    ) -> None:
        """Offline edit on the master's local copy; pushed at the next sync."""
        if self.kind != KIND_MASTER:
            raise RequiresMasterTerminal("offline edits live on the master terminal")
        entry = self._entry_by_fiscal(fiscal_code)
        entry.dirty_clear.update(clear_fields or {})
        entry.dirty_private.update({k: str(v) for k, v in (private_fields or {}).items()})
        for k, v in (keywords or {}).items():
            entry.dirty_keywords[k] = list(v)
        self.save()

    def _entry_by_fiscal(self, fiscal_code: str) -> LocalPatientEntry:
        for entry in self.entries.values():
            if entry.identity.fiscal_code == fiscal_code:
                return entry
        raise InvalidInput(f"no local entry for fiscal code {fiscal_code!r}")

    def sync_master(self) -> tuple[int, list[dict]]:
        """Reconcile the local cache with the stores, patient by patient.

        Dirty local edits are pushed first (field-level, so a remote edit to
        a different field survives), then the authoritative store content is
        fetched and cached. Returns (entries whose cache changed, per-item
        errors). Idempotent when nothing changed on either side.
        """
        if self.kind != KIND_MASTER:
            raise RequiresMasterTerminal("sync reconciles the master's local database")
        refreshed = 0
        errors: list[dict] = []
        for entry in sorted(self.entries.values(), key=lambda e: e.record_id):
            if entry.pid is None:
                continue
            try:
                if entry.dirty:
                    blobs = (
                        self._obfuscate_fields(entry.identity, entry.dirty_private, entry.dirty_keywords)
                        if entry.dirty_private
                        else {}
                    )
                    self.client.call(
                        "update_record",
                        {"pid": entry.pid.hex, "clear": entry.dirty_clear, "obfuscated": blobs},
                    )
                    entry.dirty_clear, entry.dirty_private, entry.dirty_keywords = {}, {}, {}
                snapshot = self._fetch_snapshot(entry.pid)
                if snapshot != entry.cache:
                    entry.cache = snapshot
                    refreshed += 1
            except NusaError as exc:
                errors.append({"record_id": entry.record_id, "error": exc.code})
        self.save()
        return refreshed, errors

    # -- delegation ---------------------------------------------------------------

    def offer_delegation(self, queries: Sequence[Mapping[str, str]], smd_id: str) -> list[int]:
        reply = self.client.call(
            "delegate_offer", {"queries": [dict(q) for q in queries], "grantee": smd_id}
        )
        return reply["tickets"]

    def accept_offered(self) -> list[int]:
        """Add this terminal's layer to every offered payload and accept.

        Shared by SMD delegation and patient access: in both, the grantee
        turns the offered EPID into a doubly-encrypted EEPID.
        """
        key = self._need_key()
        accepted = []
        for t in self.client.call("inbox")["tickets"]:
            payload = LayeredCiphertext.from_hex(t["payload"])
            eepid = add_layer(payload, key, rng=self._rng)
            self.client.call("accept_ticket", {"ticket": t["ticket_id"], "eepid": eepid.hex})
            accepted.append(t["ticket_id"])
        return accepted

    def finalize_accepted(self, windows: Sequence[Window] = ()) -> list[int]:
        """PMD side: strip our own layer off each accepted EEPID, leaving the
        grantee-keyed EPID, and complete the ticket. Access tickets also carry
        the pid from the local database so the stores learn their owner."""
        key = self._need_key()
        done = []
        for t in self.client.call("pmd_inbox")["tickets"]:
            eepid = LayeredCiphertext.from_hex(t["payload"])
            grantee_epid = remove_layer(eepid, key)
            args: dict[str, Any] = {
                "ticket": t["ticket_id"],
                "epid": grantee_epid.hex,
                "windows": [list(w) for w in windows],
            }
            if t["kind"] == "access":
                entry = self.entries.get(t["record_id"])
                if entry is not None and entry.pid is not None:
                    args["pid"] = entry.pid.hex
            self.client.call("complete_ticket", args)
            done.append(t["ticket_id"])
        return done

    # -- removal (two stages, master terminal) ---------------------------------------

    def remove_patient(self, query: Mapping[str, str]) -> int:
        """Stage 1 wipes the medical records, stage 2 the registry entry."""
        if self.kind != KIND_MASTER:
            raise RequiresMasterTerminal("removal runs on the master terminal")
        key = self._need_key()
        got = self.client.call("query_patient_epid", {"query": dict(query)})
        epid_hex = got["epid"]
        pid = PatientIdentifier(remove_layer(LayeredCiphertext.from_hex(epid_hex), key).body)
        self.client.call("remove_patient_stage1", {"pid": pid.hex})
        reply = self.client.call("remove_patient_stage2", {"epid": epid_hex})
        self.entries.pop(reply["record_id"], None)
        self.save()
        return reply["record_id"]

    # -- key regeneration --------------------------------------------------------------

    def regenerate_key(self, reason: str) -> dict:
        """Key-loss recovery entry point.

        pmd-loss replaces the EPIDs of every local patient and needs the
        master terminal's PID database; smd-loss revokes this MD's delegated
        grants and leaves fresh offers to re-accept with the new key.
        """
        if reason == REASON_PMD_LOSS:
            replaced, errors = self._regenerate_master_key()
            return {"reason": reason, "replaced": replaced, "errors": errors}
        if reason == REASON_SMD_LOSS:
            revoked, tickets = self._regenerate_delegate_key()
            return {"reason": reason, "revoked": revoked, "tickets": tickets}
        raise InvalidInput(f"unknown key-loss reason {reason!r}")

    def _regenerate_master_key(self) -> tuple[int, list[str]]:
        if self.kind != KIND_MASTER:
            raise RequiresMasterTerminal("key regeneration needs the local PID database")
        old_key = self._need_key()
        new_key = generate_key(self._rng)
        replacements = []
        for entry in sorted(self.entries.values(), key=lambda e: e.record_id):
            if entry.pid is None:
                continue
            got = self.client.call(
                "query_patient_epid", {"query": {"fiscal_code": entry.identity.fiscal_code}}
            )
            new_epid = add_layer(wrap_pid(entry.pid), new_key, rng=self._rng)
            replacements.append([got["epid"], new_epid.hex])
        reply = self.client.call("recover_pmd_key", {"replacements": replacements})
        self.previous_keys.append(old_key)
        self.key = new_key
        self.save()
        return reply["replaced"], reply["errors"]

    def _regenerate_delegate_key(self) -> tuple[int, list[int]]:
        old_key = self._need_key()
        new_key = generate_key(self._rng)
        reply = self.client.call("recover_smd_key", {"new_key_id": new_key.key_id.hex()})
        self.previous_keys.append(old_key)
        self.key = new_key
        self.save()
        return reply["revoked"], reply["tickets"]

    # -- legacy data ---------------------------------------------------------------------

    def attach_legacy(self, query: Mapping[str, str], store: int | str, match: Mapping[str, Any]) -> int:
        """Attach pre-existing store rows matching `match` to the patient's PID."""
        key = self._need_key()
        got = self.client.call("query_patient_epid", {"query": dict(query)})
        pid = PatientIdentifier(remove_layer(LayeredCiphertext.from_hex(got["epid"]), key).body)
        reply = self.client.call(
            "attach_legacy", {"store": store, "query": dict(match), "pid": pid.hex}
        )
        return reply["attached"]

    # -- patient-side flows --------------------------------------------------------------------

    def _own_query(self) -> dict:
        if self.own_identity is None:
            raise InvalidInput("patient terminal has no identity provisioned")
        return {"fiscal_code": self.own_identity.fiscal_code}

    def request_access(self) -> int:
        """Subscribe to one's own record (patient terminals)."""
        return self.client.call("request_access", {"query": self._own_query()})["ticket"]

    def resolve_own_pid(self) -> PatientIdentifier:
        """Open the patient's own completed grant to learn the PID."""
        key = self._need_key()
        got = self.client.call("query_patient_epid", {"query": self._own_query()})
        opened = remove_layer(LayeredCiphertext.from_hex(got["epid"]), key)
        if opened.layer_count != 0:
            raise InvalidInput("own grant EPID still has foreign layers")
        self.own_pid = PatientIdentifier(opened.body)
        self.save()
        return self.own_pid

    def my_records(self) -> list[DecryptedRecord]:
        if self.own_identity is None:
            raise InvalidInput("patient terminal has no identity provisioned")
        pid = self.own_pid or self.resolve_own_pid()
        return self._fetch_and_open(pid, self.own_identity)

    def set_field_visibility(self, fname: str, md_id: str, hidden: bool) -> None:
        """Hide or unhide one obfuscated field from one MD."""
        pid = self.own_pid or self.resolve_own_pid()
        self.client.call(
            "set_visibility",
            {"pid": pid.hex, "field": fname, "md": md_id, "hidden": hidden},
        )

    # -- misc ---------------------------------------------------------------------------------

    def keyword_search(self, terms: Iterable[str]) -> list[tuple[str, str, str]]:
        hits = self.client.call("keyword_search", {"terms": list(terms)})["hits"]
        return [tuple(h) for h in hits]

    def field_stats(self, fname: str, statistic: str, store: int | str | None = None) -> float:
        args: dict[str, Any] = {"field": fname, "statistic": statistic}
        if store is not None:
            args["store"] = store
        return self.client.call("stats", args)["value"]

    def close(self) -> None:
        self.client.close()
