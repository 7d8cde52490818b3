"""Patient Registry: identity records and per-principal access grants.

The PR is the identity side of the split architecture. It stores demographics
and, per principal (the responsible doctor, delegated doctors, the patient
himself), a single-layer encrypted patient identifier plus the validity
windows of that grant. It never stores a plaintext PID in any field: the only
PID-shaped bytes it holds are XOR-encrypted bodies.

Persistence is an append-only JSON-lines journal replayed at startup and
compacted whenever an expiry sweep runs. All mutations are serialized through
one lock (single-writer); reads copy under the lock and hand out snapshots.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .crypto_core import LayeredCiphertext
from .errors import AlreadyExists, InvalidGrant, InvalidInput, InvalidOperation, NotAuthorized, NotFound

ROLE_PMD = "PMD"
ROLE_SMD = "SMD"
ROLE_PATIENT = "PATIENT"
_ROLES = {ROLE_PMD, ROLE_SMD, ROLE_PATIENT}

# principal_id -> current public key_id; injected so grant ownership can be
# verified without the registry learning any secret material
KeyDirectory = Mapping[str, bytes]


@dataclass(frozen=True)
class Identity:
    surname: str
    given_name: str
    birthdate: str  # ISO-8601 date
    fiscal_code: str  # unique natural key

    def canonical_string(self) -> str:
        """Fixed field order and casing so every client derives the same
        obfuscation key from the same person."""
        return "|".join(
            [self.surname.upper(), self.given_name.upper(), self.birthdate, self.fiscal_code]
        )

    def to_dict(self) -> dict:
        return {
            "surname": self.surname,
            "given_name": self.given_name,
            "birthdate": self.birthdate,
            "fiscal_code": self.fiscal_code,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Identity":
        try:
            return cls(d["surname"], d["given_name"], d["birthdate"], d["fiscal_code"])
        except KeyError as exc:
            raise InvalidInput(f"identity missing field {exc}") from exc


Window = tuple[float, float]  # closed [start, end], UTC epoch seconds


def _check_windows(windows: Iterable[Window]) -> tuple[Window, ...]:
    out = []
    for w in windows:
        start, end = float(w[0]), float(w[1])
        if end < start:
            raise InvalidInput(f"window end before start: {w}")
        out.append((start, end))
    return tuple(out)


def window_covers(windows: tuple[Window, ...], at: float) -> bool:
    """Empty window list means permanently valid; intervals are closed."""
    if not windows:
        return True
    return any(start <= at <= end for start, end in windows)


@dataclass(frozen=True)
class AccessGrant:
    principal_id: str
    role: str
    epid: LayeredCiphertext
    windows: tuple[Window, ...] = ()

    def __post_init__(self):
        if self.role not in _ROLES:
            raise InvalidGrant(f"unknown role {self.role!r}")
        object.__setattr__(self, "windows", _check_windows(self.windows))

    def valid_at(self, at: float) -> bool:
        return window_covers(self.windows, at)

    def expired_by(self, now: float) -> bool:
        """All windows entirely in the past. Empty windows never expire."""
        return bool(self.windows) and all(end < now for _, end in self.windows)

    def to_dict(self) -> dict:
        return {
            "principal": self.principal_id,
            "role": self.role,
            "epid": self.epid.hex,
            "windows": [list(w) for w in self.windows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccessGrant":
        return cls(
            d["principal"],
            d["role"],
            LayeredCiphertext.from_hex(d["epid"]),
            tuple((w[0], w[1]) for w in d.get("windows", ())),
        )


@dataclass
class PersonalRecord:
    record_id: int
    identity: Identity
    grants: list[AccessGrant] = field(default_factory=list)

    def grant_for(self, principal_id: str) -> AccessGrant | None:
        for g in self.grants:
            if g.principal_id == principal_id:
                return g
        return None

    def pmd_grant(self) -> AccessGrant:
        for g in self.grants:
            if g.role == ROLE_PMD:
                return g
        raise InvalidGrant("record has no PMD grant")  # violated invariant

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "identity": self.identity.to_dict(),
            "grants": [g.to_dict() for g in self.grants],
        }


class PatientRegistry:
    """Single-writer registry over a JSON-lines journal file."""

    def __init__(self, journal_path: str | Path, key_directory: KeyDirectory | None = None):
        self._path = Path(journal_path)
        self._keys = key_directory if key_directory is not None else {}
        self._records: dict[int, PersonalRecord] = {}
        self._by_fiscal: dict[str, int] = {}
        self._next_id = 1
        self._lock = threading.RLock()
        self._path.parent.mkdir(parents=True, exist_ok=True)
        if self._path.exists():
            self._replay()

    # -- persistence ------------------------------------------------------

    def _append(self, entry: dict) -> None:
        with self._path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _replay(self) -> None:
        with self._path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                self._apply(json.loads(line))

    def _apply(self, entry: dict) -> None:
        op = entry["op"]
        if op == "create":
            rec = PersonalRecord(
                entry["record_id"],
                Identity.from_dict(entry["identity"]),
                [AccessGrant.from_dict(g) for g in entry["grants"]],
            )
            self._records[rec.record_id] = rec
            self._by_fiscal[rec.identity.fiscal_code] = rec.record_id
            self._next_id = max(self._next_id, rec.record_id + 1)
        elif op == "add_grant":
            self._records[entry["record_id"]].grants.append(AccessGrant.from_dict(entry["grant"]))
        elif op == "revoke_grant":
            rec = self._records[entry["record_id"]]
            rec.grants = [g for g in rec.grants if g.principal_id != entry["principal"]]
        elif op == "replace_epid":
            rec = self._records[entry["record_id"]]
            rec.grants = [
                replace(g, epid=LayeredCiphertext.from_hex(entry["epid"]))
                if g.principal_id == entry["principal"]
                else g
                for g in rec.grants
            ]
        elif op == "remove":
            rec = self._records.pop(entry["record_id"])
            del self._by_fiscal[rec.identity.fiscal_code]
        else:
            raise InvalidInput(f"unknown journal op {op!r}")

    def _compact(self) -> None:
        tmp = self._path.with_suffix(".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for rec in sorted(self._records.values(), key=lambda r: r.record_id):
                entry = {
                    "op": "create",
                    "record_id": rec.record_id,
                    "identity": rec.identity.to_dict(),
                    "grants": [g.to_dict() for g in rec.grants],
                }
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        tmp.replace(self._path)

    # -- grant validation --------------------------------------------------

    def _check_grant_key(self, grant: AccessGrant) -> None:
        if grant.epid.layer_count != 1:
            raise InvalidGrant("grant EPID must carry exactly one layer")
        expected = self._keys.get(grant.principal_id)
        if expected is None or grant.epid.layers[0].key_id != expected:
            raise InvalidGrant(f"EPID not keyed by principal {grant.principal_id!r}")

    # -- operations --------------------------------------------------------

    def create_entry(self, identity: Identity, pmd_grant: AccessGrant) -> int:
        with self._lock:
            if identity.fiscal_code in self._by_fiscal:
                raise AlreadyExists(f"fiscal code {identity.fiscal_code} already registered")
            if pmd_grant.role != ROLE_PMD:
                raise InvalidGrant("initial grant must have role PMD")
            self._check_grant_key(pmd_grant)
            rec = PersonalRecord(self._next_id, identity, [pmd_grant])
            self._next_id += 1
            self._records[rec.record_id] = rec
            self._by_fiscal[identity.fiscal_code] = rec.record_id
            self._append(
                {
                    "op": "create",
                    "record_id": rec.record_id,
                    "identity": identity.to_dict(),
                    "grants": [pmd_grant.to_dict()],
                }
            )
            return rec.record_id

    def find_record(self, query: Mapping[str, str]) -> PersonalRecord:
        """Resolve an identity query to exactly one record.

        fiscal_code wins when present; otherwise the exact
        (surname, given_name, birthdate) triple is required.
        """
        with self._lock:
            if "fiscal_code" in query and query["fiscal_code"]:
                rid = self._by_fiscal.get(query["fiscal_code"])
                if rid is None:
                    raise NotFound("no record for fiscal code")
                return self._snapshot(self._records[rid])
            needed = ("surname", "given_name", "birthdate")
            if not all(query.get(k) for k in needed):
                raise InvalidInput("query needs fiscal_code or full (surname, given_name, birthdate)")
            hits = [
                r
                for r in self._records.values()
                if (r.identity.surname, r.identity.given_name, r.identity.birthdate)
                == tuple(query[k] for k in needed)
            ]
            if not hits:
                raise NotFound("no record matches identity query")
            if len(hits) > 1:
                raise InvalidInput("identity query is ambiguous")
            return self._snapshot(hits[0])

    def get_record(self, record_id: int) -> PersonalRecord:
        with self._lock:
            rec = self._records.get(record_id)
            if rec is None:
                raise NotFound(f"no record {record_id}")
            return self._snapshot(rec)

    def lookup_grant(self, query: Mapping[str, str], principal_id: str, at: float) -> AccessGrant:
        """Grant for principal on the queried patient, if valid at `at`.

        Expired and absent grants are deliberately indistinguishable: both
        raise NotAuthorized, so a requester cannot probe delegation history.
        """
        with self._lock:
            rec = self.find_record(query)
            grant = rec.grant_for(principal_id)
            if grant is None or not grant.valid_at(at):
                raise NotAuthorized("no valid grant for principal")
            return grant

    def add_grant(self, record_id: int, grant: AccessGrant) -> None:
        with self._lock:
            rec = self._records.get(record_id)
            if rec is None:
                raise NotFound(f"no record {record_id}")
            if rec.grant_for(grant.principal_id) is not None:
                raise AlreadyExists(f"principal {grant.principal_id} already granted")
            if grant.role == ROLE_PMD:
                raise InvalidGrant("record already has a PMD grant")
            self._check_grant_key(grant)
            rec.grants.append(grant)
            self._append({"op": "add_grant", "record_id": record_id, "grant": grant.to_dict()})

    def revoke_grant(self, record_id: int, principal_id: str) -> None:
        with self._lock:
            rec = self._records.get(record_id)
            if rec is None:
                raise NotFound(f"no record {record_id}")
            grant = rec.grant_for(principal_id)
            if grant is None:
                raise NotFound(f"no grant for {principal_id}")
            if grant.role == ROLE_PMD:
                raise InvalidOperation("PMD grant is removed only via patient removal")
            rec.grants = [g for g in rec.grants if g.principal_id != principal_id]
            self._append({"op": "revoke_grant", "record_id": record_id, "principal": principal_id})

    def replace_grant_epid(self, record_id: int, principal_id: str, new_epid: LayeredCiphertext) -> None:
        with self._lock:
            rec = self._records.get(record_id)
            if rec is None:
                raise NotFound(f"no record {record_id}")
            grant = rec.grant_for(principal_id)
            if grant is None:
                raise NotFound(f"no grant for {principal_id}")
            self._check_grant_key(replace(grant, epid=new_epid))
            rec.grants = [
                replace(g, epid=new_epid) if g.principal_id == principal_id else g for g in rec.grants
            ]
            self._append(
                {
                    "op": "replace_epid",
                    "record_id": record_id,
                    "principal": principal_id,
                    "epid": new_epid.hex,
                }
            )

    def sweep_expired(self, now: float) -> int:
        """Drop every grant whose windows all ended before `now`; compact."""
        with self._lock:
            removed = 0
            for rec in self._records.values():
                keep = []
                for g in rec.grants:
                    if g.expired_by(now):
                        removed += 1
                    else:
                        keep.append(g)
                rec.grants = keep
            self._compact()
            return removed

    def list_patients_of(self, principal_id: str, at: float) -> list[tuple[int, Identity, AccessGrant]]:
        with self._lock:
            out = []
            for rec in sorted(self._records.values(), key=lambda r: r.record_id):
                grant = rec.grant_for(principal_id)
                if grant is not None and grant.valid_at(at):
                    out.append((rec.record_id, rec.identity, grant))
            return out

    def remove_entry(self, record_id: int) -> None:
        with self._lock:
            rec = self._records.get(record_id)
            if rec is None:
                raise NotFound(f"no record {record_id}")
            del self._records[record_id]
            del self._by_fiscal[rec.identity.fiscal_code]
            self._append({"op": "remove", "record_id": record_id})

    def find_by_grant_epid(self, principal_id: str, epid: LayeredCiphertext) -> PersonalRecord:
        """Record whose grant for `principal_id` holds exactly this EPID.

        This is how the second removal stage locates the registry entry: the
        registry itself cannot decrypt anything, so matching is byte-equality
        on the serialized grant ciphertext.
        """
        with self._lock:
            wanted = epid.serialize()
            for rec in self._records.values():
                g = rec.grant_for(principal_id)
                if g is not None and g.epid.serialize() == wanted:
                    return self._snapshot(rec)
            raise NotFound("no grant matches the presented EPID")

    def all_records(self) -> list[PersonalRecord]:
        with self._lock:
            return [self._snapshot(r) for r in sorted(self._records.values(), key=lambda r: r.record_id)]

    def dump(self) -> str:
        """Full state as JSON lines, for privacy-separation scans."""
        with self._lock:
            return "\n".join(json.dumps(r.to_dict(), sort_keys=True) for r in self.all_records())

    @staticmethod
    def _snapshot(rec: PersonalRecord) -> PersonalRecord:
        return PersonalRecord(rec.record_id, rec.identity, list(rec.grants))
