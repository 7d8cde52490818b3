"""Separation scanner: proves the on-disk state keeps identities and PIDs apart.

The scanner works from outside the system, armed with the ground-truth
(identity, PID) pairs that only the test harness knows. It walks every
persisted file of a deployment state directory and applies the
separation rules:

  * registry files must contain no PID material at all,
  * record-store files must contain no identity strings at all,
  * everything else (server logs, ticket journals, terminal state) must
    never co-locate one patient's identity with that same patient's PID
    in a single file.

The ground truth lives under ``harness/`` inside the state directory;
that subtree is harness property, not deployment state, and is skipped.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidInput

GROUND_TRUTH_NAME = "ground_truth.jsonl"
HARNESS_DIR = "harness"

RULE_PID_IN_REGISTRY = "pid-in-registry"
RULE_IDENTITY_IN_STORE = "identity-in-store"
RULE_LINKAGE = "identity-pid-linkage"

# identity fragments shorter than this are too generic to scan for
_MIN_MARKER_LEN = 3


@dataclass(frozen=True)
class GroundTruthPair:
    fiscal_code: str
    pid_hex: str
    identity_strings: tuple[str, ...]


@dataclass(frozen=True)
class Violation:
    file: str  # relative to the state dir
    rule: str
    subject: str  # fiscal code of the affected patient, or pid prefix
    detail: str

    def to_dict(self) -> dict:
        return {"file": self.file, "rule": self.rule, "subject": self.subject, "detail": self.detail}


def load_ground_truth(state_dir: str | Path) -> list[GroundTruthPair]:
    path = Path(state_dir) / HARNESS_DIR / GROUND_TRUTH_NAME
    if not path.exists():
        raise InvalidInput(f"no ground-truth file at {path}; run a scenario first")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ident = row["identity"]
            strings = tuple(
                s
                for s in (ident.get("surname", ""), ident.get("given_name", ""), ident.get("fiscal_code", ""))
                if len(s) >= _MIN_MARKER_LEN
            )
            pairs.append(GroundTruthPair(ident["fiscal_code"], row["pid"].lower(), strings))
    return pairs


def record_ground_truth(state_dir: str | Path, identity_dict: dict, pid_hex: str) -> None:
    """Harness-side helper: remember one (identity, PID) pair for scanning."""
    d = Path(state_dir) / HARNESS_DIR
    d.mkdir(parents=True, exist_ok=True)
    with (d / GROUND_TRUTH_NAME).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps({"identity": identity_dict, "pid": pid_hex}, sort_keys=True) + "\n")


def _classify(rel: Path) -> str:
    if rel.parts and rel.parts[0] == HARNESS_DIR:
        return "skip"
    name = rel.name
    if name.startswith("registry"):
        return "registry"
    if name.startswith("ehr"):
        return "store"
    return "other"


def _found_pid(pair: GroundTruthPair, text: str, raw: bytes) -> bool:
    return pair.pid_hex in text or bytes.fromhex(pair.pid_hex) in raw


def _found_identity(pair: GroundTruthPair, text: str) -> list[str]:
    return [s for s in pair.identity_strings if s.lower() in text]


def privacy_scan(state_dir: str | Path, pairs: list[GroundTruthPair] | None = None) -> list[Violation]:
    """Scan every persisted file under state_dir for separation violations."""
    root = Path(state_dir)
    if not root.is_dir():
        raise InvalidInput(f"state directory {root} does not exist")
    if pairs is None:
        pairs = load_ground_truth(root)
    violations: list[Violation] = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root)
        kind = _classify(rel)
        if kind == "skip":
            continue
        raw = path.read_bytes()
        text = raw.decode("utf-8", errors="ignore").lower()
        for pair in pairs:
            has_pid = _found_pid(pair, text, raw)
            idents = _found_identity(pair, text)
            if kind == "registry" and has_pid:
                violations.append(
                    Violation(str(rel), RULE_PID_IN_REGISTRY, pair.fiscal_code, f"pid {pair.pid_hex[:8]}… present")
                )
            elif kind == "store" and idents:
                violations.append(
                    Violation(str(rel), RULE_IDENTITY_IN_STORE, pair.fiscal_code, f"identity strings {idents}")
                )
            elif kind == "other" and has_pid and idents:
                violations.append(
                    Violation(
                        str(rel),
                        RULE_LINKAGE,
                        pair.fiscal_code,
                        f"identity strings {idents} co-located with pid {pair.pid_hex[:8]}…",
                    )
                )
    return sorted(violations, key=lambda v: (v.file, v.rule, v.subject))
