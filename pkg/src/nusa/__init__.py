"""Test bed for a pseudonymized, multi-store health-record architecture.

The package models four cooperating parties:

* a patient registry that maps real identities to per-delegate access grants,
* one or more record stores that file medical data under opaque patient ids,
* an aggregation-and-login server that brokers every cross-party flow while
  holding no decryption keys of its own, and
* terminal clients (practice master/slave devices and patient devices) that
  hold the keys and perform all encryption locally.

Patient identifiers travel between parties only under layered stream-cipher
encryption whose layers commute, so each hop can add or strip its own layer
without seeing the plaintext id.  ``scenario`` replays scripted multi-actor
sessions against a fresh deployment and ``privacy_scan`` audits the resulting
state directory for separation violations.
"""
from .crypto_core import (
    DEFAULT_WORK_FACTOR,
    EncryptionLayer,
    LayeredCiphertext,
    ObfuscatedBlob,
    PatientIdentifier,
    SecretKey,
    add_layer,
    deobfuscate,
    derive_obfuscation_key,
    generate_key,
    generate_pid,
    keystream,
    obfuscate,
    remove_layer,
    wrap_pid,
)
from .deployment import Deployment, DeploymentConfig
from .ehr_store import EHRStore, MedicalRecord
from .errors import NusaError, error_for_code
from .patient_registry import AccessGrant, Identity, PatientRegistry, Window
from .privacy_scan import Violation, load_ground_truth, privacy_scan
from .scenario import ScenarioRunner, deterministic_view, render_report, run_scenario
from .sweep import SweepDaemon
from .terminal import Terminal, TerminalStore

__version__ = "0.1.0"

__all__ = [
    "AccessGrant",
    "DEFAULT_WORK_FACTOR",
    "Deployment",
    "DeploymentConfig",
    "EHRStore",
    "EncryptionLayer",
    "Identity",
    "LayeredCiphertext",
    "MedicalRecord",
    "NusaError",
    "ObfuscatedBlob",
    "PatientIdentifier",
    "PatientRegistry",
    "ScenarioRunner",
    "SecretKey",
    "SweepDaemon",
    "Terminal",
    "TerminalStore",
    "Violation",
    "Window",
    "add_layer",
    "deobfuscate",
    "derive_obfuscation_key",
    "deterministic_view",
    "error_for_code",
    "generate_key",
    "generate_pid",
    "keystream",
    "load_ground_truth",
    "obfuscate",
    "privacy_scan",
    "remove_layer",
    "render_report",
    "run_scenario",
    "wrap_pid",
    "__version__",
]
