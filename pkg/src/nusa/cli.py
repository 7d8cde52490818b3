"""Command-line front end: serve, run, scan, sweep."""
from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from .als.wire import ProtocolServer
from .deployment import Deployment, DeploymentConfig
from .errors import NusaError
from .privacy_scan import privacy_scan
from .scenario import ScenarioError, render_report, run_scenario
from .sweep import SweepDaemon


def _cmd_serve(args: argparse.Namespace) -> int:
    config = DeploymentConfig.load(args.config)
    deployment = Deployment(config)
    if args.provision:
        with open(args.provision, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                key_id = bytes.fromhex(row["key_id"]) if row.get("key_id") else None
                deployment.als.enroll(row["principal"], row["credential"], row["role"], key_id)
    server = ProtocolServer(deployment.als, config.host, config.port).start()
    host, port = server.address
    print(f"serving nusa/1 on {host}:{port} (state: {config.state_dir})", flush=True)
    daemon = None
    if args.sweep_interval:
        daemon = SweepDaemon(deployment.als, args.sweep_interval).start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        if daemon is not None:
            daemon.stop()
        server.stop()
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    state_dir = args.state or tempfile.mkdtemp(prefix="nusa-run-")
    try:
        report = run_scenario(
            args.scenario, state_dir, seed=args.seed, parallel_actors=args.parallel_actors
        )
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    rendered = render_report(report)
    if args.report:
        Path(args.report).write_text(rendered + "\n", encoding="utf-8")
    else:
        print(rendered)
    if not report["ok"]:
        failed = [s for s in report["steps"] if not s["ok"]]
        for s in failed:
            print(f"step {s['index']} failed: {json.dumps(s, sort_keys=True)}", file=sys.stderr)
        if not report["scan"]["ok"]:
            print(f"scan mismatch: {json.dumps(report['scan'], sort_keys=True)}", file=sys.stderr)
        return 1
    return 0


def _cmd_scan(args: argparse.Namespace) -> int:
    try:
        violations = privacy_scan(args.state_dir)
    except NusaError as exc:
        print(f"scan error: {exc}", file=sys.stderr)
        return 2
    for v in violations:
        print(json.dumps(v.to_dict(), sort_keys=True))
    print(f"{len(violations)} violation(s)", file=sys.stderr)
    return 1 if violations else 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = DeploymentConfig.load(args.config)
    deployment = Deployment(config)
    try:
        daemon = SweepDaemon(deployment.als, args.interval)
    except NusaError as exc:
        print(f"sweep error: {exc}", file=sys.stderr)
        return 2
    if args.ticks:
        for _ in range(args.ticks):
            time.sleep(args.interval)
            daemon.tick()
        print(f"{daemon.removed_total} expired grant(s) removed over {daemon.ticks} tick(s)")
        return 0
    daemon.start()
    print(f"sweeping every {args.interval}s (Ctrl-C to stop)", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        daemon.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nusa", description="pseudonymized health-record test bed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="boot the aggregation server over a socket")
    p_serve.add_argument("--config", required=True, help="deployment config file (JSON)")
    p_serve.add_argument("--provision", help="line-delimited principal file to enroll at boot")
    p_serve.add_argument("--sweep-interval", type=float, default=0.0, help="run the sweep daemon")
    p_serve.set_defaults(func=_cmd_serve)

    p_run = sub.add_parser("run", help="replay a scripted scenario against a fresh deployment")
    p_run.add_argument("scenario", help="scenario file (line-delimited JSON)")
    p_run.add_argument("--seed", type=int, default=None, help="override the header seed")
    p_run.add_argument("--state", default=None, help="state directory (default: fresh temp dir)")
    p_run.add_argument("--report", default=None, help="write the report here instead of stdout")
    p_run.add_argument("--parallel-actors", action="store_true", help="run marked blocks concurrently")
    p_run.set_defaults(func=_cmd_run)

    p_scan = sub.add_parser("scan", help="privacy-separation scan of a deployment state dir")
    p_scan.add_argument("state_dir")
    p_scan.set_defaults(func=_cmd_scan)

    p_sweep = sub.add_parser("sweep", help="run the expiry sweep daemon against a quiescent deployment")
    p_sweep.add_argument("--config", required=True, help="deployment config file (JSON)")
    p_sweep.add_argument("--interval", type=float, required=True, help="seconds between sweeps")
    p_sweep.add_argument("--ticks", type=int, default=0, help="run N ticks then exit (0 = forever)")
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NusaError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
