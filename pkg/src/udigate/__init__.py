"""Container image gateway and job-launch pipeline for batch clusters.

The package covers the full path a containerized job takes: an image is
pulled from a registry, flattened to a single rootfs tree, adjusted for
the site, written out as a verifiable archive, and mounted on every
compute node before the first rank starts.  A virtual-clock simulator,
fault-injection scenarios, and a startup benchmark ride on the same code.
"""

from .authsvc import (
    Credential,
    CredentialVerifier,
    Principal,
    credential_from_wire,
    credential_to_wire,
    issue_credential,
    verify_credential,
)
from .bench import BenchRow, ScalingReport, bench_startup, classify_scaling, read_rows, write_rows
from .chaos import SCENARIO_NAMES, ScenarioReport, run_all, run_scenario
from .clock import SystemClock, Tracer, VirtualClock
from .cluster import (
    ClusterSim,
    JobCommand,
    JobResult,
    JobSpec,
    derive_seed,
    parse_job_file,
    validate_spec,
)
from .config import Config, load_config, parse_config
from .errors import (
    AuthError,
    AuthServiceDown,
    ConversionError,
    CredentialExpired,
    IdentityTimeout,
    IllegalTransition,
    InsufficientData,
    InvalidReference,
    InvalidSpec,
    LeaseRevoked,
    MacMismatch,
    MissingGres,
    NotFound,
    PersistenceCorrupt,
    RegistryError,
    StorageIoError,
    UdiCorrupt,
    UdigateError,
    UnknownScenario,
    VerifyError,
)
from .filetree import FileTree, SiteConfig, SiteMod, apply_site_mods, flatten, parse_site_file
from .gateway import Gateway, ImageRecord, ImageState, PullTask
from .nodeagent import GroupCache, IdentityBackend, NodeAgent
from .refs import ImageReference, parse_reference
from .registry import HttpRegistryClient, LocalRegistry, Manifest
from .store import RecordLog, load_entries
from .udi import UdiDescriptor, read_udi, scan_udi, verify_udi, write_udi

__version__ = "0.1.0"

__all__ = [
    "AuthError",
    "AuthServiceDown",
    "BenchRow",
    "ClusterSim",
    "Config",
    "ConversionError",
    "Credential",
    "CredentialExpired",
    "CredentialVerifier",
    "FileTree",
    "Gateway",
    "GroupCache",
    "HttpRegistryClient",
    "IdentityBackend",
    "IdentityTimeout",
    "IllegalTransition",
    "ImageRecord",
    "ImageReference",
    "ImageState",
    "InsufficientData",
    "InvalidReference",
    "InvalidSpec",
    "JobCommand",
    "JobResult",
    "JobSpec",
    "LeaseRevoked",
    "LocalRegistry",
    "MacMismatch",
    "Manifest",
    "MissingGres",
    "NodeAgent",
    "NotFound",
    "PersistenceCorrupt",
    "Principal",
    "PullTask",
    "RecordLog",
    "RegistryError",
    "SCENARIO_NAMES",
    "ScalingReport",
    "ScenarioReport",
    "SiteConfig",
    "SiteMod",
    "StorageIoError",
    "SystemClock",
    "Tracer",
    "UdiCorrupt",
    "UdiDescriptor",
    "UdigateError",
    "UnknownScenario",
    "VerifyError",
    "VirtualClock",
    "apply_site_mods",
    "bench_startup",
    "classify_scaling",
    "credential_from_wire",
    "credential_to_wire",
    "derive_seed",
    "flatten",
    "issue_credential",
    "load_config",
    "load_entries",
    "parse_config",
    "parse_job_file",
    "parse_reference",
    "parse_site_file",
    "read_rows",
    "read_udi",
    "run_all",
    "run_scenario",
    "scan_udi",
    "validate_spec",
    "verify_credential",
    "verify_udi",
    "write_rows",
    "write_udi",
]
