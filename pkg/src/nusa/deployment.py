"""Deployment wiring: one registry, N record stores, one aggregation server.

A deployment is described by a small JSON config (store count or explicit
paths, obfuscation work factor, session lifetime, bind address) and lives
inside a single state directory. Everything under that directory is what
the privacy scanner inspects, so component layout here is also the
separation boundary: registry and store journals never share a file.
"""
from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .als import AggregationLoginServer, DirectTransport, ProtocolClient, SocketTransport
from .crypto_core import DEFAULT_WORK_FACTOR
from .ehr_store import EHRStore
from .errors import InvalidInput
from .patient_registry import PatientRegistry
from .terminal import Terminal, TerminalStore

DEFAULT_SESSION_LIFETIME = 1800.0


@dataclass
class DeploymentConfig:
    state_dir: str
    ehr_store_count: int = 2
    store_paths: list[str] = field(default_factory=list)
    obfuscation_salt: str = "6e752e73612d73616c74"  # hex, deployment-wide
    obfuscation_iterations: int = DEFAULT_WORK_FACTOR
    session_lifetime: float = DEFAULT_SESSION_LIFETIME
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if self.ehr_store_count < 1 and not self.store_paths:
            raise InvalidInput("deployment needs at least one record store")
        if self.obfuscation_iterations < 1:
            raise InvalidInput("obfuscation work factor must be >= 1")
        bytes.fromhex(self.obfuscation_salt)  # validate early

    @property
    def salt_bytes(self) -> bytes:
        return bytes.fromhex(self.obfuscation_salt)

    def to_dict(self) -> dict:
        return {
            "state_dir": self.state_dir,
            "ehr_store_count": self.ehr_store_count,
            "store_paths": list(self.store_paths),
            "obfuscation_salt": self.obfuscation_salt,
            "obfuscation_iterations": self.obfuscation_iterations,
            "session_lifetime": self.session_lifetime,
            "host": self.host,
            "port": self.port,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        if "state_dir" not in d:
            raise InvalidInput("config must name a state_dir")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "DeploymentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


class Deployment:
    """Builds and owns the server-side components of one test bed."""

    def __init__(
        self,
        config: DeploymentConfig,
        *,
        clock: Callable[[], float] = time.time,
        rng: random.Random | None = None,
    ):
        self.config = config
        self.clock = clock
        self.rng = rng
        self.state_dir = Path(config.state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.key_directory: dict[str, bytes] = {}
        self.registry = PatientRegistry(self.state_dir / "registry.jsonl", self.key_directory)
        if config.store_paths:
            paths = [Path(p) for p in config.store_paths]
        else:
            paths = [self.state_dir / f"ehr_{i}.jsonl" for i in range(config.ehr_store_count)]
        self.stores = [EHRStore(p, name=p.stem) for p in paths]
        self.als = AggregationLoginServer(
            self.registry,
            self.stores,
            self.key_directory,
            self.state_dir / "als",
            clock=clock,
            rng=rng,
            session_lifetime=config.session_lifetime,
        )

    def local_client(self) -> ProtocolClient:
        return ProtocolClient(DirectTransport(self.als))

    def terminal_dir(self) -> Path:
        d = self.state_dir / "terminals"
        d.mkdir(exist_ok=True)
        return d

    def make_terminal(self, name: str, kind: str, passphrase: str, *, client: ProtocolClient | None = None) -> Terminal:
        store = TerminalStore(self.terminal_dir() / f"{name}.state", passphrase, rng=self.rng)
        return Terminal(
            client or self.local_client(),
            store,
            kind=kind,
            obfuscation_salt=self.config.salt_bytes,
            obfuscation_iterations=self.config.obfuscation_iterations,
            rng=self.rng,
        )


def remote_client(host: str, port: int) -> ProtocolClient:
    return ProtocolClient(SocketTransport(host, port))
