"""Desk-scale emulation of a distributed filesystem whose directory
updates are applied asynchronously, coordinated by an in-network
membership set of directory fingerprints."""

from .config import ClusterConfig, CostModel
from .core import (
    DirEntryRecord,
    Fingerprint,
    HashConfig,
    InodeKey,
    InodeRecord,
    ROOT_ID,
    ROOT_KEY,
    fingerprint_of,
    owner_of_inode,
)
from .errors import Errno
from .harness import Cluster, Driver, RunResult, compare_states, run_workload
from .netsim import EventLog, Fabric, FaultProfile
from .refmodel import ReferenceModel
from .staleset import InsertResult, RemoveResult, StaleSet
from .switch import Switch
from .wal import WalKind, WalLog
from .workload import DATACENTER_RATIOS, PANGU_RATIOS, OpSource, WorkloadSpec

__all__ = [
    "ClusterConfig", "CostModel", "DirEntryRecord", "Fingerprint", "HashConfig",
    "InodeKey", "InodeRecord", "ROOT_ID", "ROOT_KEY", "fingerprint_of",
    "owner_of_inode", "Errno", "Cluster", "Driver", "RunResult", "compare_states",
    "run_workload", "EventLog", "Fabric", "FaultProfile", "ReferenceModel",
    "InsertResult", "RemoveResult", "StaleSet", "Switch", "WalKind", "WalLog",
    "DATACENTER_RATIOS", "PANGU_RATIOS", "OpSource", "WorkloadSpec",
]
