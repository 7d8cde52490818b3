"""Scripted multi-party scenario runner.

A scenario file is line-delimited JSON. The first line is a header:

    {"scenario": "delegation_full", "seed": 7, "start_time": 1700000000,
     "config": {"ehr_store_count": 2, "obfuscation_iterations": 128},
     "actors": [{"id": "pmd1", "role": "MD", "kind": "master"}, ...],
     "expect_scan": []}

Every further non-empty, non-comment line is one step: either an actor
step {"actor", "op", "args", "expect" | "expect_error"} or a harness
step {"harness", ...}. Actors are driven through real terminal
emulators over the in-process transport, so every step crosses the wire
codec exactly as a socket client would.

Determinism contract: the run is driven by one seeded RNG and a virtual
clock, so two runs with the same seed produce byte-identical reports
once the timing section is stripped (see deterministic_view).

Principal ids are pseudonyms by design; scenario authors must not embed
patient names in them, or the separation scanner will rightly complain.
"""
from __future__ import annotations

import json
import random
import threading
import time
from pathlib import Path
from typing import Any

from .deployment import Deployment, DeploymentConfig
from .errors import NusaError
from .patient_registry import Identity
from .privacy_scan import GROUND_TRUTH_NAME, HARNESS_DIR, privacy_scan, record_ground_truth
from .terminal import KIND_MASTER, KIND_PATIENT, KIND_SLAVE, DecryptedRecord, Terminal

DEFAULT_START_TIME = 1_700_000_000.0


class ScenarioError(Exception):
    """The scenario file itself is unusable (exit code 2 territory)."""


class VirtualClock:
    def __init__(self, start: float):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        with self._lock:
            self._now += float(seconds)
            return self._now


def _parse_time(value: Any, start_time: float) -> float:
    """Absolute epoch seconds, or '+N' strings relative to scenario start."""
    if isinstance(value, str):
        if not value.startswith("+"):
            raise ScenarioError(f"bad time literal {value!r}")
        return start_time + float(value[1:])
    return float(value)


def _parse_windows(raw: Any, start_time: float) -> list[tuple[float, float]]:
    if not raw:
        return []
    return [(_parse_time(s, start_time), _parse_time(e, start_time)) for s, e in raw]


def _record_to_dict(rec: DecryptedRecord) -> dict:
    return {
        "store": rec.store,
        "clear": dict(rec.clear_fields),
        "private": dict(rec.private_fields),
        "undecryptable": sorted(rec.undecryptable),
    }


def _matches(expected: Any, actual: Any) -> bool:
    """Subset semantics for dicts, exact for lists and scalars."""
    if isinstance(expected, dict):
        if not isinstance(actual, dict):
            return False
        return all(k in actual and _matches(v, actual[k]) for k, v in expected.items())
    if isinstance(expected, list):
        if not isinstance(actual, list) or len(expected) != len(actual):
            return False
        return all(_matches(e, a) for e, a in zip(expected, actual))
    if isinstance(expected, float) or isinstance(actual, float):
        try:
            return abs(float(expected) - float(actual)) < 1e-9
        except (TypeError, ValueError):
            return False
    return expected == actual


class ScenarioRunner:
    """Executes one scenario against a fresh deployment in state_dir."""

    def __init__(
        self,
        scenario_path: str | Path,
        state_dir: str | Path,
        *,
        seed: int | None = None,
        parallel_actors: bool = False,
    ):
        self.path = Path(scenario_path)
        self.state_dir = Path(state_dir)
        self.parallel_actors = parallel_actors
        header, steps = self._load()
        self.header = header
        self.steps = steps
        self.name = header.get("scenario", self.path.stem)
        self.seed = seed if seed is not None else int(header.get("seed", 0))
        self.start_time = float(header.get("start_time", DEFAULT_START_TIME))
        self.expect_scan = header.get("expect_scan", [])
        self.clock = VirtualClock(self.start_time)
        self.rng = random.Random(self.seed)
        config_overrides = dict(header.get("config", {}))
        config_overrides.setdefault("obfuscation_iterations", 256)
        self.config = DeploymentConfig(state_dir=str(self.state_dir), **config_overrides)
        self.deployment = Deployment(self.config, clock=self.clock.now, rng=self.rng)
        self.terminals: dict[str, Terminal] = {}
        self._known_pids: set[str] = set()

    # -- loading -------------------------------------------------------------

    def _load(self) -> tuple[dict, list[dict]]:
        if not self.path.exists():
            raise ScenarioError(f"scenario file {self.path} does not exist")
        lines = []
        for n, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                lines.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{self.path}:{n}: bad JSON: {exc}")
        if not lines:
            raise ScenarioError(f"{self.path}: empty scenario")
        header, steps = lines[0], lines[1:]
        if "actors" not in header:
            raise ScenarioError(f"{self.path}: header declares no actors")
        return header, steps

    # -- provisioning ----------------------------------------------------------

    def _provision(self) -> None:
        masters: dict[str, Terminal] = {}
        for actor in self.header["actors"]:
            actor_id = actor["id"]
            kind = actor.get("kind", KIND_MASTER)
            role = actor.get("role", "PATIENT" if kind == KIND_PATIENT else "MD").upper()
            credential = actor.get("credential", f"cred-{actor_id}")
            identity = Identity.from_dict(actor["identity"]) if "identity" in actor else None
            terminal = self.deployment.make_terminal(actor_id, kind, f"pass-{actor_id}")
            if kind == KIND_SLAVE:
                master_id = actor.get("principal")
                if master_id not in masters:
                    raise ScenarioError(f"slave {actor_id!r} names unknown master {master_id!r}")
                master = masters[master_id]
                credential = actor.get("credential", f"cred-{master_id}")
                terminal.provision(master.principal or master_id, credential, key=master.key)
            else:
                key = terminal.provision(actor_id, credential, identity=identity)
                self.deployment.als.enroll(actor_id, credential, role, key_id=key.key_id)
                if kind == KIND_MASTER:
                    masters[actor_id] = terminal
            self.terminals[actor_id] = terminal
        for actor in self.header["actors"]:
            self.terminals[actor["id"]].login()

    # -- ground truth ------------------------------------------------------------

    def _harvest_ground_truth(self) -> None:
        for terminal in self.terminals.values():
            if terminal.kind != KIND_MASTER:
                continue
            for entry in terminal.entries.values():
                if entry.pid is None or entry.pid.hex in self._known_pids:
                    continue
                record_ground_truth(self.state_dir, entry.identity.to_dict(), entry.pid.hex)
                self._known_pids.add(entry.pid.hex)

    def _pid_of(self, fiscal_code: str) -> str:
        for terminal in self.terminals.values():
            for entry in terminal.entries.values():
                if entry.identity.fiscal_code == fiscal_code and entry.pid is not None:
                    return entry.pid.hex
        raise ScenarioError(f"no known pid for fiscal code {fiscal_code!r}")

    # -- actor steps --------------------------------------------------------------

    def _run_actor_step(self, step: dict) -> dict:
        actor_id = step["actor"]
        terminal = self.terminals.get(actor_id)
        if terminal is None:
            raise ScenarioError(f"unknown actor {actor_id!r}")
        op = step.get("op")
        args = dict(step.get("args", {}))
        outcome: dict[str, Any] = {"actor": actor_id, "op": op}
        try:
            result = self._dispatch(terminal, op, args)
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed args for {actor_id!r} op {op!r}: {exc!r}") from exc
        except NusaError as exc:
            expected = step.get("expect_error")
            outcome["error"] = exc.code
            outcome["ok"] = expected == exc.code
            if not outcome["ok"] and expected:
                outcome["expected_error"] = expected
            return outcome
        outcome["result"] = result
        if "expect_error" in step:
            outcome["ok"] = False
            outcome["expected_error"] = step["expect_error"]
        elif "expect" in step:
            outcome["ok"] = _matches(step["expect"], result)
            if not outcome["ok"]:
                outcome["expected"] = step["expect"]
        else:
            outcome["ok"] = True
        return outcome

    def _dispatch(self, t: Terminal, op: str, args: dict) -> Any:
        if op == "login":
            session = t.login()
            return {"principal": session["principal"], "role": session["role"]}
        if op == "populate_patient":
            return t.populate_patient(
                Identity.from_dict(args["identity"]),
                args.get("clear"),
                args.get("private"),
                args.get("keywords"),
                stores=args.get("stores", [0]),
            )
        if op == "master_populate":
            return t.master_populate(self.path.parent / args["file"], args.get("stores", [0]))
        if op == "lookup_patient":
            got = t.lookup_patient(args["query"])
            return {
                "record_id": got["record_id"],
                "identity": got["identity"].to_dict(),
                "records": [_record_to_dict(r) for r in got["records"]],
            }
        if op == "update_patient":
            return t.update_patient(
                args["query"], args.get("clear"), args.get("private"), args.get("keywords")
            )
        if op == "edit_local":
            t.edit_local(
                args["fiscal_code"], args.get("clear"), args.get("private"), args.get("keywords")
            )
            return True
        if op == "sync_master":
            refreshed, errors = t.sync_master()
            return {"refreshed": refreshed, "errors": errors}
        if op == "offer_delegation":
            return t.offer_delegation(args["queries"], args["grantee"])
        if op == "accept_offered":
            return t.accept_offered()
        if op == "finalize_accepted":
            return t.finalize_accepted(_parse_windows(args.get("windows"), self.start_time))
        if op == "remove_patient":
            return t.remove_patient(args["query"])
        if op == "regenerate_key":
            return t.regenerate_key(args["reason"])
        if op == "attach_legacy":
            return t.attach_legacy(args["query"], args["store"], args["match"])
        if op == "request_access":
            return t.request_access()
        if op == "resolve_own_pid":
            t.resolve_own_pid()
            return True
        if op == "my_records":
            return [_record_to_dict(r) for r in t.my_records()]
        if op == "set_field_visibility":
            t.set_field_visibility(args["field"], args["md"], bool(args["hidden"]))
            return True
        if op == "keyword_search":
            hits = t.keyword_search(args["terms"])
            return {
                "count": len(hits),
                "fields": sorted({f"{store}:{field}" for store, _pid, field in hits}),
            }
        if op == "field_stats":
            return t.field_stats(args["field"], args["statistic"], args.get("store"))
        raise ScenarioError(f"unknown actor op {op!r}")

    # -- harness steps ---------------------------------------------------------------

    def _run_harness_step(self, step: dict) -> dict:
        op = step["harness"]
        outcome: dict[str, Any] = {"harness": op}
        if op == "advance_time":
            outcome["result"] = self.clock.advance(step["seconds"]) - self.start_time
            outcome["ok"] = True
            return outcome
        if op == "sweep":
            result: Any = self.deployment.als.sweep_expired()
        elif op == "scan":
            result = self._normalized_scan()
        elif op == "import_legacy":
            store = self._store_by_ref(step["store"])
            result = store.import_legacy_file(self.path.parent / step["file"])
        elif op == "plant_pid_in_registry":
            pid_hex = self._pid_of(step["fiscal_code"])
            planted = self.state_dir / "registry_planted.jsonl"
            with planted.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"note": "fault injection", "pid": pid_hex}) + "\n")
            result = str(planted.name)
        elif op == "plant_linkage_in_als":
            fiscal = step["fiscal_code"]
            pid_hex = self._pid_of(fiscal)
            planted = self.state_dir / "als" / "als_planted.log"
            planted.parent.mkdir(exist_ok=True)
            with planted.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"fiscal_code": fiscal, "pid": pid_hex}) + "\n")
            result = str(planted.name)
        else:
            raise ScenarioError(f"unknown harness op {op!r}")
        outcome["result"] = result
        outcome["ok"] = _matches(step["expect"], result) if "expect" in step else True
        if not outcome["ok"]:
            outcome["expected"] = step["expect"]
        return outcome

    def _store_by_ref(self, ref: int | str):
        for idx, store in enumerate(self.deployment.stores):
            if ref == idx or ref == store.name:
                return store
        raise ScenarioError(f"unknown store {ref!r}")

    def _normalized_scan(self) -> list[list[str]]:
        # a scenario that never populated anyone has no ground truth to
        # scan against; that is a vacuously clean state, not an error
        if not (self.state_dir / HARNESS_DIR / GROUND_TRUTH_NAME).exists():
            return []
        violations = privacy_scan(self.state_dir)
        return sorted([v.file, v.rule] for v in violations)

    # -- main loop ----------------------------------------------------------------------

    def run(self) -> dict:
        started = time.time()
        self._provision()
        self._harvest_ground_truth()
        outcomes: list[dict] = []
        for step in self.steps:
            if "harness" in step and step["harness"] == "parallel":
                outcomes.extend(self._run_parallel_block(step))
            elif "harness" in step:
                outcomes.append(self._run_harness_step(step))
            elif "actor" in step:
                outcomes.append(self._run_actor_step(step))
                self._harvest_ground_truth()
            else:
                raise ScenarioError(f"step is neither actor nor harness: {step}")
        scan_found = self._normalized_scan()
        expected_scan = sorted([str(e[0]), str(e[1])] for e in self.expect_scan)
        scan_ok = scan_found == expected_scan
        for i, outcome in enumerate(outcomes):
            outcome["index"] = i
        failed = sum(1 for o in outcomes if not o["ok"])
        report = {
            "scenario": self.name,
            "seed": self.seed,
            "steps": outcomes,
            "scan": {"found": scan_found, "expected": expected_scan, "ok": scan_ok},
            "passed": len(outcomes) - failed,
            "failed": failed,
            "ok": failed == 0 and scan_ok,
            "timing": {
                "wall_seconds": round(time.time() - started, 6),
                "virtual_start": self.start_time,
                "virtual_end": self.clock.now(),
                "state_dir": str(self.state_dir),
            },
        }
        return report

    def _run_parallel_block(self, step: dict) -> list[dict]:
        """Actor steps driven concurrently when --parallel-actors is on.

        Outcome order always follows declaration order, so reports stay
        comparable between the two modes for read-only blocks.
        """
        substeps = step.get("steps", [])
        results: list[dict | None] = [None] * len(substeps)
        if not self.parallel_actors:
            return [self._run_actor_step(s) for s in substeps]

        def work(i: int, s: dict) -> None:
            results[i] = self._run_actor_step(s)

        threads = [threading.Thread(target=work, args=(i, s)) for i, s in enumerate(substeps)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        return [r for r in results if r is not None]


def deterministic_view(report: dict) -> str:
    """Render the seed-reproducible part of a report (timing stripped)."""
    trimmed = {k: v for k, v in report.items() if k != "timing"}
    return json.dumps(trimmed, sort_keys=True, indent=2)


def render_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def run_scenario(
    scenario_path: str | Path,
    state_dir: str | Path,
    *,
    seed: int | None = None,
    parallel_actors: bool = False,
) -> dict:
    runner = ScenarioRunner(scenario_path, state_dir, seed=seed, parallel_actors=parallel_actors)
    return runner.run()
