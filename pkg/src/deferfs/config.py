"""Cluster-wide configuration knobs and the service-cost model."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import HashConfig
from .staleset import DEFAULT_STAGES


@dataclass(frozen=True)
class CostModel:
    """Per-handler service times in simulated microseconds, charged against
    a server's serial CPU. Invented desk-scale constants: the load-bearing
    relation is that a synchronous parent-directory inode transaction is
    far costlier than a change-log append, which is what makes deferred
    updates pay off under contention."""

    validate: int = 1
    wal_append: int = 4
    kv_put: int = 2
    kv_delete: int = 2
    log_append: int = 1
    inode_txn: int = 25  # synchronous parent update / per-directory commit
    entry_apply: int = 1  # per change-log entry during aggregation
    read: int = 2
    lookup: int = 1
    collect_reply: int = 2
    rename_piece: int = 10


@dataclass
class ClusterConfig:
    n_servers: int = 4
    n_clients: int = 4
    hash: HashConfig = field(default_factory=HashConfig)
    stages: int = DEFAULT_STAGES
    mode: str = "async"  # "sync" forces stage count 0 so every insert overflows

    push_threshold: int = 29  # change-log entries per proactive push
    idle_timeout: int = 50_000  # push a quiet change-log after this long
    grace_period: int = 10_000  # owner-side quiet window before aggregating

    key_lease: int = 500_000  # locks held for a lost unlock notification
    changelog_lease: int = 30_000  # collection locks held for a lost ack
    collect_retry: int = 5_000  # resend interval for collection requests
    collect_max_tries: int = 200
    txn_poll_timeout: int = 100_000  # prepared participant asks for the outcome
    recovery_delay: int = 20_000  # crash-to-replay latency

    base_latency: int = 1000
    reorder_unit: int = 250

    client_timeout: int = 2_000  # first retransmit timeout
    client_backoff: int = 2
    client_backoff_cap: int = 64_000
    client_max_tries: int = 5

    costs: CostModel = field(default_factory=CostModel)

    @property
    def effective_stages(self) -> int:
        return 0 if self.mode == "sync" else self.stages
