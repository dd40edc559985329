"""Per-directory change-logs in recast form, plus the invalidation list.

A change-log entry is a delayed parent-directory update (timestamp,
operation type, child name). The recast form consolidates timestamps into
a single running maximum and keeps (entry id, op, name) in append order.
Entries move from the live queue to an unacknowledged set when shipped
and are reclaimed once the directory's owner acknowledges application.
Entry ids (origin server, counter) make application exactly-once however
many times an entry is re-shipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

OP_CREATE = "create"
OP_DELETE = "delete"
OP_MKDIR = "mkdir"
OP_RMDIR_CHILD = "rmdir-child"

_PUT_OPS = (OP_CREATE, OP_MKDIR)


@dataclass(frozen=True, slots=True)
class ChangeLogEntry:
    """Raw form of one delayed parent update."""

    timestamp: int
    op_type: str
    name: bytes


@dataclass(slots=True)
class ChangeLog:
    """Recast change-log of one directory on one server."""

    dir_id: bytes
    fp: int  # fingerprint as_int the shipping target is derived from
    max_ts: int = 0
    live: list = field(default_factory=list)  # [(eid, op, name, perms)] append order
    unacked: dict = field(default_factory=dict)  # eid -> (op, name, perms), shipped
    last_append: int = 0

    def append(self, eid, op_type: str, name: bytes, perms: int, ts: int, now: int) -> int:
        self.max_ts = max(self.max_ts, ts)
        self.live.append((eid, op_type, name, perms))
        self.last_append = now
        return len(self.live)

    def ship_live(self) -> list:
        shipped = self.live
        self.live = []
        for eid, op, name, perms in shipped:
            self.unacked[eid] = (op, name, perms)
        return shipped

    def all_pending(self) -> list:
        """Unacked then live, in entry-id order (eids are per-origin
        monotone, so this is the original append order)."""
        items = [(eid, op, name, perms) for eid, (op, name, perms) in self.unacked.items()]
        items += self.live
        items.sort(key=lambda e: e[0])
        return items

    def mark_applied(self, eids) -> None:
        eidset = set(tuple(e) for e in eids)
        for eid in list(self.unacked):
            if eid in eidset:
                del self.unacked[eid]
        if any(tuple(e[0]) in eidset for e in self.live):
            self.live = [e for e in self.live if tuple(e[0]) not in eidset]

    @property
    def pending(self) -> int:
        return len(self.live) + len(self.unacked)


class ChangeLogTable:
    """All change-logs held by one server, keyed by directory id."""

    def __init__(self):
        self.logs: dict[bytes, ChangeLog] = {}
        self.live_high_water = 0  # max live-queue length ever seen

    def get(self, dir_id: bytes) -> ChangeLog | None:
        return self.logs.get(dir_id)

    def get_or_create(self, dir_id: bytes, fp: int) -> ChangeLog:
        log = self.logs.get(dir_id)
        if log is None:
            log = ChangeLog(dir_id, fp)
            self.logs[dir_id] = log
        return log

    def append(self, dir_id: bytes, fp: int, eid, op_type, name, perms, ts, now) -> ChangeLog:
        log = self.get_or_create(dir_id, fp)
        depth = log.append(eid, op_type, name, perms, ts, now)
        if depth > self.live_high_water:
            self.live_high_water = depth
        return log

    def logs_for_fp(self, fp: int) -> list[ChangeLog]:
        return sorted(
            (log for log in self.logs.values() if log.fp == fp and log.pending),
            key=lambda l: l.dir_id,
        )

    def dirty_dirs(self) -> list[ChangeLog]:
        return [log for log in self.logs.values() if log.pending]

    def pending_for(self, dir_id: bytes) -> int:
        log = self.logs.get(dir_id)
        return log.pending if log else 0


class InvalidationList:
    """Directory ids removed by rmdir, with removal timestamps. Used to
    fail operations under deleted paths; never garbage collected."""

    def __init__(self):
        self.removed: dict[bytes, int] = {}

    def add(self, dir_id: bytes, ts: int) -> None:
        self.removed.setdefault(dir_id, ts)

    def discard(self, dir_id: bytes) -> None:
        self.removed.pop(dir_id, None)

    def __contains__(self, dir_id: bytes) -> bool:
        return dir_id in self.removed

    def snapshot(self) -> dict[bytes, int]:
        return dict(self.removed)

    def load(self, snap: dict[bytes, int]) -> None:
        self.removed = dict(snap)


def replay_sequentially(entries, base_entries: dict, base_size: int, base_mtime: int):
    """Independent oracle for change-log application: fold raw entries one
    at a time over an entry map, tracking size and mtime exactly as a
    synchronous filesystem would."""
    entry_map = dict(base_entries)
    size = base_size
    mtime = base_mtime
    for e in entries:
        if e.op_type in _PUT_OPS:
            if e.name not in entry_map:
                size += 1
            entry_map[e.name] = e.op_type
        else:
            if e.name in entry_map:
                del entry_map[e.name]
                size -= 1
        mtime = max(mtime, e.timestamp)
    return entry_map, size, mtime
