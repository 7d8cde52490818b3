#!/usr/bin/env python3
"""Replay every bundled scenario into a scratch directory and summarize.

Usage: python3 scripts/run_all_scenarios.py [--keep] [--parallel-actors]
"""
import argparse
import shutil
import sys
import tempfile
from pathlib import Path

from nusa.scenario import run_scenario

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "src" / "nusa" / "scenarios"
FIXTURES = {"patients_batch.jsonl", "legacy_rows.jsonl"}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--keep", action="store_true", help="keep the state directories")
    ap.add_argument("--parallel-actors", action="store_true")
    args = ap.parse_args()

    root = Path(tempfile.mkdtemp(prefix="nusa-scenarios-"))
    failures = 0
    for path in sorted(SCENARIO_DIR.glob("*.jsonl")):
        if path.name in FIXTURES:
            continue
        state = root / path.stem
        report = run_scenario(path, state, parallel_actors=args.parallel_actors)
        status = "ok" if report["ok"] else "FAIL"
        print(f"{status:4s} {path.stem:28s} steps={report['passed']}/{len(report['steps'])} "
              f"scan={'match' if report['scan']['ok'] else 'MISMATCH'} "
              f"wall={report['timing']['wall_seconds']:.3f}s")
        if not report["ok"]:
            failures += 1
    if args.keep:
        print(f"state kept under {root}")
    else:
        shutil.rmtree(root)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
