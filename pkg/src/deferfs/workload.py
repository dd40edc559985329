"""Workload generation.

Four patterns: a single shared directory, many directories, bursts of
creates per directory, and a mixed stream sampled from measured ratio
tables. The source is demand-driven and feasibility-aware: it never
deletes a name that does not exist, never issues two conflicting
operations on one name concurrently, and keeps directory reads exclusive
of in-flight updates to the same directory so read results are exactly
checkable against the reference model.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

# Per-operation weights derived from the measured category ratios of a
# large production deployment: directory updates 30.76% (create 31.14%,
# delete 38.62%, mkdir 0.01%, rmdir 0.01%, file rename 30.21% within the
# category), directory reads 4.19% (statdir 6.61%, readdir 93.39%), others
# 65.05% (open/close 80.85% split evenly, stat 19.00% + 0.15% misc).
PANGU_RATIOS = {
    "create": 0.3076 * 0.3114,
    "delete": 0.3076 * 0.3862,
    "mkdir": 0.3076 * 0.0001,
    "rmdir": 0.3076 * 0.0001,
    "rename": 0.3076 * 0.3021,
    "statdir": 0.0419 * 0.0661,
    "readdir": 0.0419 * 0.9339,
    "open": 0.6505 * 0.8085 / 2,
    "close": 0.6505 * 0.8085 / 2,
    "stat": 0.6505 * (0.1900 + 0.0015),
}

# Datacenter-services trace mix; the 0.1% chmod share is folded into stat.
DATACENTER_RATIOS = {
    "open": 0.526 / 2,
    "close": 0.526 / 2,
    "stat": 0.124 + 0.001,
    "create": 0.0958,
    "delete": 0.119,
    "rename": 0.093,
    "readdir": 0.039,
    "statdir": 0.002,
}

UPDATE_OPS = frozenset({"create", "delete", "mkdir", "rmdir", "rename"})
DIR_READ_OPS = frozenset({"statdir", "readdir"})


@dataclass(slots=True)
class OpDesc:
    kind: str
    path: str
    dst_path: str | None = None
    perms: int = 0o644
    dirs: tuple = ()  # directory paths whose update/read counters this op holds


@dataclass
class WorkloadSpec:
    pattern: str  # single-dir | multi-dir | burst | mixed
    op_count: int
    inflight: int = 32
    n_dirs: int = 1024
    burst_size: int = 10
    ratios: dict | None = None
    skew: tuple | None = None  # e.g. (0.8, 0.2): 80% of ops in 20% of dirs
    seed: int = 0


class OpSource:
    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.remaining = spec.op_count
        n = 1 if spec.pattern == "single-dir" else spec.n_dirs
        self.dirs = [f"/d{i}" for i in range(n)]
        self.live: dict[str, list] = {d: [] for d in self.dirs}
        self.busy: set[tuple[str, str]] = set()
        self.updates: dict[str, int] = {d: 0 for d in self.dirs}
        self.reads: dict[str, int] = {d: 0 for d in self.dirs}
        self.subdirs: dict[str, list] = {d: [] for d in self.dirs}
        self.name_ctr = 0
        self.burst_left = 0
        self.burst_dir: str | None = None
        if spec.pattern == "mixed" and spec.ratios is None:
            self.ratios = PANGU_RATIOS
        else:
            self.ratios = spec.ratios or {}
        total = sum(self.ratios.values()) or 1.0
        self._cdf = []
        acc = 0.0
        for k, v in self.ratios.items():
            acc += v / total
            self._cdf.append((acc, k))

    # ------------------------------------------------------------------ setup

    def setup_ops(self) -> list[OpDesc]:
        return [OpDesc("mkdir", d, perms=0o755) for d in self.dirs]

    # ------------------------------------------------------------------ picks

    def _fresh_name(self) -> str:
        self.name_ctr += 1
        return f"f{self.name_ctr:07d}"

    def _pick_dir(self, *, for_update: bool) -> str | None:
        dirs = self.dirs
        if self.spec.skew:
            hot_share, dir_share = self.spec.skew
            hot_n = max(1, int(len(dirs) * dir_share))
            pool = dirs[:hot_n] if self.rng.random() < hot_share else dirs
        else:
            pool = dirs
        for _ in range(8):
            d = pool[self.rng.randrange(len(pool))]
            if for_update and self.reads[d] == 0:
                return d
            if not for_update and self.updates[d] == 0 and self.reads.get(d) is not None:
                return d
        return None

    def _pick_live(self, d: str) -> str | None:
        files = self.live[d]
        for _ in range(8):
            if not files:
                return None
            name = files[self.rng.randrange(len(files))]
            if (d, name) not in self.busy:
                return name
        return None

    def _sample_kind(self) -> str:
        x = self.rng.random()
        for edge, kind in self._cdf:
            if x <= edge:
                return kind
        return self._cdf[-1][1]

    # ------------------------------------------------------------------ stream

    def next(self) -> OpDesc | None:
        if self.remaining <= 0:
            return None
        op = self._build()
        if op is not None:
            self.remaining -= 1
            for d in op.dirs:
                if op.kind in DIR_READ_OPS:
                    self.reads[d] += 1
                elif op.kind in UPDATE_OPS:
                    self.updates[d] += 1
        return op

    def _build(self) -> OpDesc | None:
        p = self.spec.pattern
        if p in ("single-dir", "multi-dir"):
            d = self.dirs[0] if p == "single-dir" else self._pick_dir(for_update=True)
            if d is None:
                return None
            return self._op_create(d)
        if p == "burst":
            if self.burst_left == 0 or self.burst_dir is None:
                d = self._pick_dir(for_update=True)
                if d is None:
                    return None
                self.burst_dir = d
                self.burst_left = self.spec.burst_size
            self.burst_left -= 1
            return self._op_create(self.burst_dir)
        return self._build_mixed()

    def _op_create(self, d: str) -> OpDesc:
        name = self._fresh_name()
        self.busy.add((d, name))
        return OpDesc("create", f"{d}/{name}", dirs=(d,))

    def _build_mixed(self) -> OpDesc | None:
        for _ in range(12):
            kind = self._sample_kind()
            op = self._try_build(kind)
            if op is not None:
                return op
        d = self._pick_dir(for_update=True)
        return self._op_create(d) if d is not None else None

    def _try_build(self, kind: str) -> OpDesc | None:
        if kind == "create":
            d = self._pick_dir(for_update=True)
            return self._op_create(d) if d else None
        if kind == "delete":
            d = self._pick_dir(for_update=True)
            if not d:
                return None
            name = self._pick_live(d)
            if not name:
                return None
            self.busy.add((d, name))
            return OpDesc("delete", f"{d}/{name}", dirs=(d,))
        if kind in ("open", "close", "stat"):
            d = self._pick_dir(for_update=False)
            if not d:
                return None
            name = self._pick_live(d)
            if not name:
                return None
            self.busy.add((d, name))
            return OpDesc(kind, f"{d}/{name}", dirs=())
        if kind == "rename":
            sd = self._pick_dir(for_update=True)
            if not sd:
                return None
            name = self._pick_live(sd)
            if not name:
                return None
            dd = sd if self.rng.random() < 0.5 else self._pick_dir(for_update=True)
            if dd is None:
                return None
            dst = self._fresh_name()
            self.busy.add((sd, name))
            self.busy.add((dd, dst))
            dirs = (sd,) if dd == sd else (sd, dd)
            return OpDesc("rename", f"{sd}/{name}", dst_path=f"{dd}/{dst}", dirs=dirs)
        if kind in DIR_READ_OPS:
            d = self._pick_dir(for_update=False)
            if not d or self.updates[d] > 0:
                return None
            return OpDesc(kind, d, dirs=(d,))
        if kind == "mkdir":
            d = self._pick_dir(for_update=True)
            if not d:
                return None
            name = "s" + self._fresh_name()
            self.busy.add((d, name))
            return OpDesc("mkdir", f"{d}/{name}", perms=0o755, dirs=(d,))
        if kind == "rmdir":
            for d in self.dirs:
                if self.reads[d] == 0 and self.subdirs[d]:
                    name = self.subdirs[d][-1]
                    if (d, name) not in self.busy:
                        self.subdirs[d].pop()
                        self.busy.add((d, name))
                        return OpDesc("rmdir", f"{d}/{name}", dirs=(d,))
            return None
        return None

    # -------------------------------------------------------------- completion

    def complete(self, op: OpDesc, ok: bool, indeterminate: bool = False) -> None:
        for d in op.dirs:
            if op.kind in DIR_READ_OPS:
                self.reads[d] -= 1
            elif op.kind in UPDATE_OPS:
                self.updates[d] -= 1
        if op.kind in DIR_READ_OPS:
            return
        d, name = op.path.rsplit("/", 1)
        if indeterminate:
            return  # quarantine: the name stays busy forever
        if op.kind == "create":
            if ok:
                self.live[d].append(name)
            self.busy.discard((d, name))
        elif op.kind == "delete":
            if ok:
                self.live[d].remove(name)
            self.busy.discard((d, name))
        elif op.kind == "mkdir":
            if ok:
                self.subdirs[d].append(name)
            self.busy.discard((d, name))
        elif op.kind == "rmdir":
            if not ok:
                self.subdirs[d].append(name)
            self.busy.discard((d, name))
        elif op.kind == "rename":
            dd, dname = op.dst_path.rsplit("/", 1)
            if ok:
                self.live[d].remove(name)
                self.live[dd].append(dname)
            self.busy.discard((d, name))
            self.busy.discard((dd, dname))
        else:
            self.busy.discard((d, name))


def materialize(spec: WorkloadSpec) -> list[OpDesc]:
    """Generate the whole stream with instant completions; used to test
    stream-level properties of the generator itself."""
    src = OpSource(spec)
    out = []
    while True:
        op = src.next()
        if op is None:
            if src.remaining <= 0:
                break
            continue
        src.complete(op, True)
        out.append(op)
    return out


def updates_not_followed_by_read(ops: list[OpDesc]) -> float:
    """Share of directory updates whose directory's next operation is not
    a directory read (or that are never followed by one)."""
    def dirs_of(op: OpDesc):
        out = [op.path.rsplit("/", 1)[0]] if op.kind != "readdir" and op.kind != "statdir" else [op.path]
        if op.kind == "rename" and op.dst_path:
            out.append(op.dst_path.rsplit("/", 1)[0])
        return out

    next_kind: dict[str, str] = {}
    good = 0
    total = 0
    for op in reversed(ops):
        if op.kind in UPDATE_OPS:
            total += 1
            nxt = [next_kind.get(d) for d in dirs_of(op)]
            if not any(k in DIR_READ_OPS for k in nxt if k):
                good += 1
        for d in dirs_of(op):
            next_kind[d] = op.kind
    return good / total if total else 1.0
