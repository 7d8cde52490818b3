"""EHR store: medical records keyed by PID, with no identity attributes.

The medical side of the split architecture. Records carry clear fields,
obfuscated fields (stream-encrypted blobs with a clear keyword index) and
per-field visibility denials. An identity deny-list rejects inserts that would
smuggle demographics into the medical store, which keeps the privacy
separation mechanical rather than aspirational.

Pre-populated ("legacy") rows model stores that existed before pseudonyms:
they are indexed by an opaque native key until a PID is attached, after which
their payload is folded into the PID-keyed record.

Same persistence/concurrency contract as the registry: JSON-lines journal,
single writer, snapshot reads.
"""

from __future__ import annotations

import json
import re
import statistics
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .crypto_core import ObfuscatedBlob, PatientIdentifier
from .errors import AlreadyExists, IdentityLeakRejected, InvalidField, InvalidInput, NoData, NotFound

# Field names that obviously carry identity, normalized (lowercase, no _-/space)
_DENY_FIELD_NAMES = {
    "surname",
    "familyname",
    "lastname",
    "givenname",
    "firstname",
    "name",
    "fullname",
    "birthdate",
    "dateofbirth",
    "fiscalcode",
    "codicefiscale",
    "taxcode",
    "ssn",
}

# Italian fiscal code shape; a clear string value containing one anywhere is
# rejected (anchoring only at the ends would let embedded codes through)
_FISCAL_CODE_RE = re.compile(
    r"(?<![A-Za-z0-9])[A-Za-z]{6}\d{2}[A-Za-z]\d{2}[A-Za-z]\d{3}[A-Za-z](?![A-Za-z0-9])"
)


def _normalize_field_name(name: str) -> str:
    return re.sub(r"[\s_\-]+", "", name).lower()


def check_identity_denylist(clear_fields: Mapping[str, object]) -> None:
    """Raise IdentityLeakRejected on identity-shaped field names or values."""
    for name, value in clear_fields.items():
        if _normalize_field_name(name) in _DENY_FIELD_NAMES:
            raise IdentityLeakRejected(f"clear field name {name!r} is identity-like")
        if isinstance(value, str) and _FISCAL_CODE_RE.search(value):
            raise IdentityLeakRejected(f"clear field {name!r} holds a fiscal-code-shaped value")


@dataclass
class MedicalRecord:
    pid: PatientIdentifier
    clear_fields: dict[str, object] = field(default_factory=dict)
    obfuscated_fields: dict[str, ObfuscatedBlob] = field(default_factory=dict)
    hidden_for: dict[str, set[str]] = field(default_factory=dict)
    patient_owner: str | None = None  # pseudonymous principal id, set at access-flow completion

    def to_dict(self) -> dict:
        return {
            "pid": self.pid.hex,
            "clear": dict(self.clear_fields),
            "obfuscated": {k: v.to_dict() for k, v in self.obfuscated_fields.items()},
            "hidden_for": {k: sorted(v) for k, v in self.hidden_for.items() if v},
            "patient_owner": self.patient_owner,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MedicalRecord":
        return cls(
            PatientIdentifier.from_hex(d["pid"]),
            dict(d.get("clear", {})),
            {k: ObfuscatedBlob.from_dict(v) for k, v in d.get("obfuscated", {}).items()},
            {k: set(v) for k, v in d.get("hidden_for", {}).items()},
            d.get("patient_owner"),
        )


@dataclass
class LegacyRecord:
    native_key: str
    payload: dict[str, object] = field(default_factory=dict)
    pid: PatientIdentifier | None = None

    def to_dict(self) -> dict:
        return {
            "native_key": self.native_key,
            "payload": dict(self.payload),
            "pid": self.pid.hex if self.pid else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LegacyRecord":
        pid = d.get("pid")
        return cls(d["native_key"], dict(d.get("payload", {})), PatientIdentifier.from_hex(pid) if pid else None)


@dataclass
class RecordView:
    """What a requester is allowed to see: hidden obfuscated fields omitted."""

    pid: PatientIdentifier
    clear_fields: dict[str, object]
    obfuscated_fields: dict[str, ObfuscatedBlob]

    def to_dict(self) -> dict:
        return {
            "pid": self.pid.hex,
            "clear": dict(self.clear_fields),
            "obfuscated": {k: v.to_dict() for k, v in self.obfuscated_fields.items()},
        }


class EHRStore:
    def __init__(self, journal_path: str | Path, name: str = "ehr"):
        self.name = name
        self._path = Path(journal_path)
        self._records: dict[bytes, MedicalRecord] = {}
        self._legacy: list[LegacyRecord] = []
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
                if line:
                    self._apply(json.loads(line))

    def _apply(self, entry: dict) -> None:
        op = entry["op"]
        if op == "insert":
            rec = MedicalRecord.from_dict(entry["record"])
            self._records[rec.pid.bytes] = rec
        elif op == "update":
            rec = self._records[bytes.fromhex(entry["pid"])]
            rec.clear_fields.update(entry.get("clear", {}))
            for k, v in entry.get("obfuscated", {}).items():
                rec.obfuscated_fields[k] = ObfuscatedBlob.from_dict(v)
        elif op == "replace":
            rec = MedicalRecord.from_dict(entry["record"])
            self._records[rec.pid.bytes] = rec
        elif op == "remove":
            gone = bytes.fromhex(entry["pid"])
            self._records.pop(gone, None)
            self._legacy = [r for r in self._legacy if not (r.pid and r.pid.bytes == gone)]
        elif op == "visibility":
            rec = self._records[bytes.fromhex(entry["pid"])]
            hidden = rec.hidden_for.setdefault(entry["field"], set())
            if entry["hidden"]:
                hidden.add(entry["md"])
            else:
                hidden.discard(entry["md"])
        elif op == "owner":
            self._records[bytes.fromhex(entry["pid"])].patient_owner = entry["patient"]
        elif op == "legacy":
            self._legacy.append(LegacyRecord.from_dict(entry["record"]))
        elif op == "attach":
            pid = PatientIdentifier.from_hex(entry["pid"])
            for rec in self._legacy:
                if rec.native_key in entry["native_keys"]:
                    rec.pid = pid
            self._merge_attached(pid, entry["native_keys"])
        else:
            raise InvalidInput(f"unknown journal op {op!r}")

    # -- operations --------------------------------------------------------

    def insert(self, record: MedicalRecord) -> None:
        with self._lock:
            if record.pid.bytes in self._records:
                raise AlreadyExists(f"pid {record.pid.hex} already present")
            check_identity_denylist(record.clear_fields)
            self._records[record.pid.bytes] = record
            self._append({"op": "insert", "record": record.to_dict()})

    def has_pid(self, pid: PatientIdentifier) -> bool:
        with self._lock:
            return pid.bytes in self._records

    def query_by_pid(self, pid: PatientIdentifier, requester: str) -> RecordView:
        with self._lock:
            rec = self._records.get(pid.bytes)
            if rec is None:
                raise NotFound("no record for pid")
            visible = {
                name: blob
                for name, blob in rec.obfuscated_fields.items()
                if requester not in rec.hidden_for.get(name, ())
            }
            return RecordView(rec.pid, dict(rec.clear_fields), visible)

    def update(
        self,
        pid: PatientIdentifier,
        clear_deltas: Mapping[str, object] | None = None,
        obfuscated_deltas: Mapping[str, ObfuscatedBlob] | None = None,
    ) -> None:
        with self._lock:
            rec = self._records.get(pid.bytes)
            if rec is None:
                raise NotFound("no record for pid")
            clear_deltas = dict(clear_deltas or {})
            check_identity_denylist(clear_deltas)
            rec.clear_fields.update(clear_deltas)
            obf = dict(obfuscated_deltas or {})
            rec.obfuscated_fields.update(obf)
            self._append(
                {
                    "op": "update",
                    "pid": pid.hex,
                    "clear": clear_deltas,
                    "obfuscated": {k: v.to_dict() for k, v in obf.items()},
                }
            )

    def replace(self, pid: PatientIdentifier, record: MedicalRecord) -> None:
        """Swap the record content wholesale, keeping the pid key.

        Patient-set visibility denials and the owner stamp survive a content
        replace (for fields that still exist); otherwise any MD write could
        silently undo the patient's choices.
        """
        with self._lock:
            old = self._records.get(pid.bytes)
            if old is None:
                raise NotFound("no record for pid")
            if record.pid.bytes != pid.bytes:
                raise InvalidInput("replacement must keep the pid key")
            check_identity_denylist(record.clear_fields)
            for fname, denied in old.hidden_for.items():
                if fname in record.obfuscated_fields:
                    record.hidden_for.setdefault(fname, set()).update(denied)
            if record.patient_owner is None:
                record.patient_owner = old.patient_owner
            self._records[pid.bytes] = record
            self._append({"op": "replace", "record": record.to_dict()})

    def remove_by_pid(self, pid: PatientIdentifier) -> None:
        with self._lock:
            if pid.bytes not in self._records:
                raise NotFound("no record for pid")
            del self._records[pid.bytes]
            self._legacy = [r for r in self._legacy if not (r.pid and r.pid.bytes == pid.bytes)]
            self._append({"op": "remove", "pid": pid.hex})

    # -- legacy rows -------------------------------------------------------

    def import_legacy(self, records: Iterable[LegacyRecord]) -> int:
        """Load pre-existing rows (no PID yet). Deny-list applies to payloads."""
        with self._lock:
            n = 0
            for rec in records:
                check_identity_denylist(rec.payload)
                self._legacy.append(rec)
                self._append({"op": "legacy", "record": rec.to_dict()})
                n += 1
            return n

    def import_legacy_file(self, path: str | Path) -> int:
        with Path(path).open(encoding="utf-8") as fh:
            records = [LegacyRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
        return self.import_legacy(records)

    def attach_pid_to_legacy(self, query: Mapping[str, object], pid: PatientIdentifier) -> int:
        """Attach `pid` to every legacy row matching the native query.

        The query is equality over native_key and/or payload fields. Matching
        rows gain the pid and their payload is folded into the PID-keyed
        record (created on first attach), so query_by_pid reaches the data.
        Rows already attached to a different pid are left alone; re-attaching
        the same pid is a no-op that still counts the row as matched.
        """
        with self._lock:
            matched = []
            for rec in self._legacy:
                if self._legacy_matches(rec, query) and (rec.pid is None or rec.pid.bytes == pid.bytes):
                    matched.append(rec)
            if not matched:
                return 0
            for rec in matched:
                rec.pid = pid
            self._merge_attached(pid, [r.native_key for r in matched])
            self._append(
                {"op": "attach", "pid": pid.hex, "native_keys": [r.native_key for r in matched]}
            )
            return len(matched)

    @staticmethod
    def _legacy_matches(rec: LegacyRecord, query: Mapping[str, object]) -> bool:
        for k, v in query.items():
            if k == "native_key":
                if rec.native_key != v:
                    return False
            elif rec.payload.get(k) != v:
                return False
        return True

    def _merge_attached(self, pid: PatientIdentifier, native_keys: Iterable[str]) -> None:
        keys = set(native_keys)
        target = self._records.get(pid.bytes)
        if target is None:
            target = MedicalRecord(pid)
            self._records[pid.bytes] = target
        for rec in self._legacy:
            if rec.native_key in keys and rec.pid and rec.pid.bytes == pid.bytes:
                for fname, value in rec.payload.items():
                    target.clear_fields.setdefault(fname, value)

    # -- search, visibility, statistics -------------------------------------

    def keyword_search(self, terms: Iterable[str], requester: str) -> list[tuple[PatientIdentifier, str]]:
        """(pid, field) pairs whose keyword index intersects `terms`.

        Matching is exact per keyword, case-insensitive, no stemming. Fields
        hidden for the requester never appear in results.
        """
        wanted = {t.lower() for t in terms}
        out = []
        with self._lock:
            for rec in self._records.values():
                for fname, blob in rec.obfuscated_fields.items():
                    if requester in rec.hidden_for.get(fname, ()):
                        continue
                    if wanted & {k.lower() for k in blob.keyword_index}:
                        out.append((rec.pid, fname))
        out.sort(key=lambda t: (t[0].hex, t[1]))
        return out

    def set_visibility(self, pid: PatientIdentifier, fname: str, md_id: str, hidden: bool) -> None:
        with self._lock:
            rec = self._records.get(pid.bytes)
            if rec is None:
                raise NotFound("no record for pid")
            if fname in rec.clear_fields:
                raise InvalidField("visibility applies to obfuscated fields only")
            if fname not in rec.obfuscated_fields:
                raise NotFound(f"no obfuscated field {fname!r}")
            bucket = rec.hidden_for.setdefault(fname, set())
            if hidden:
                bucket.add(md_id)
            else:
                bucket.discard(md_id)
            self._append({"op": "visibility", "pid": pid.hex, "field": fname, "md": md_id, "hidden": hidden})

    def set_patient_owner(self, pid: PatientIdentifier, patient_id: str) -> None:
        """Record which (pseudonymous) patient principal owns this record.

        Written when the patient-access flow completes; it is what authorizes
        later visibility changes without the server ever linking the pid to an
        identity.
        """
        with self._lock:
            rec = self._records.get(pid.bytes)
            if rec is None:
                raise NotFound("no record for pid")
            rec.patient_owner = patient_id
            self._append({"op": "owner", "pid": pid.hex, "patient": patient_id})

    def patient_owner_of(self, pid: PatientIdentifier) -> str | None:
        with self._lock:
            rec = self._records.get(pid.bytes)
            if rec is None:
                raise NotFound("no record for pid")
            return rec.patient_owner

    def numeric_values(self, fname: str) -> list[float]:
        with self._lock:
            out = []
            for rec in self._records.values():
                v = rec.clear_fields.get(fname)
                if isinstance(v, bool):
                    continue
                if isinstance(v, (int, float)):
                    out.append(float(v))
            return out

    def stats(self, fname: str, statistic: str) -> float:
        """Population statistic over every record holding the clear field."""
        values = self.numeric_values(fname)
        if not values:
            raise NoData(f"no numeric values for field {fname!r}")
        if statistic == "mean":
            return statistics.fmean(values)
        if statistic == "variance":
            return statistics.pvariance(values)
        if statistic == "count":
            return float(len(values))
        raise InvalidInput(f"unknown statistic {statistic!r}")

    # -- introspection ------------------------------------------------------

    def all_pids(self) -> list[PatientIdentifier]:
        with self._lock:
            return [r.pid for r in self._records.values()]

    def dump(self) -> str:
        """Full state as JSON lines, for privacy-separation scans."""
        with self._lock:
            lines = [json.dumps(r.to_dict(), sort_keys=True) for _, r in sorted(self._records.items())]
            lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self._legacy]
            return "\n".join(lines)
