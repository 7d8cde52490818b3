import random

import pytest

from nusa.deployment import Deployment, DeploymentConfig
from nusa.patient_registry import Identity


class FakeClock:
    """Deterministic, manually advanced time source."""

    def __init__(self, start: float = 1_700_000_000.0):
        self.t = float(start)

    def __call__(self) -> float:
        return self.t

    def advance(self, seconds: float) -> float:
        self.t += seconds
        return self.t


def make_identity(i: int) -> Identity:
    """Distinct, fiscal-code-shaped synthetic identities."""
    fiscal = f"TSTAAA{i % 100:02d}A{(i // 100) % 100:02d}B{(i // 10000) % 1000:03d}X"
    return Identity(
        surname=f"Fam{i}",
        given_name=f"Nome{i}",
        birthdate=f"19{70 + i % 30:02d}-01-01",
        fiscal_code=fiscal,
    )


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def deployment(tmp_path, clock):
    cfg = DeploymentConfig(
        state_dir=str(tmp_path / "state"),
        ehr_store_count=2,
        obfuscation_iterations=64,
        session_lifetime=3600.0,
    )
    dep = Deployment(cfg, clock=clock, rng=random.Random(42))
    yield dep


@pytest.fixture
def als(deployment):
    return deployment.als


def make_master(deployment, name="pmd1", credential=None, enroll=True):
    credential = credential or f"cred-{name}"
    term = deployment.make_terminal(name, "master", f"pass-{name}")
    key = term.provision(name, credential)
    if enroll:
        deployment.als.enroll(name, credential, "MD", key_id=key.key_id)
    term.login()
    return term


def make_patient(deployment, name, identity, credential=None):
    credential = credential or f"cred-{name}"
    term = deployment.make_terminal(name, "patient", f"pass-{name}")
    key = term.provision(name, credential, identity=identity)
    deployment.als.enroll(name, credential, "PATIENT", key_id=key.key_id)
    term.login()
    return term
