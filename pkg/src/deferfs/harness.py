"""Run harness: assembles a cluster, drives workloads through client
handles, spot-checks every directory read against the reference model,
then quiesces (drains pushes, force-aggregates every scattered group) and
compares the full distributed state to the model byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .client import Client
from .config import ClusterConfig
from .core import InodeKey, ROOT_ID, fingerprint_of, owner_of_inode, ROOT_KEY
from .errors import Errno
from .netsim import EventLog, Fabric, FaultProfile
from .refmodel import ReferenceModel
from .server import MetadataServer
from .sim import Future, Simulator, gather
from .staleset import StaleSet
from .switch import Switch
from .workload import OpDesc, OpSource, WorkloadSpec
from .wire import unh


class Cluster:
    def __init__(self, cfg: ClusterConfig, profile: FaultProfile = FaultProfile(),
                 log_enabled: bool = False):
        self.cfg = cfg
        self.sim = Simulator()
        self.staleset = StaleSet(cfg.effective_stages, cfg.hash.index_bits)
        self.switch = Switch(self.staleset, cfg.n_servers)
        self.fabric = Fabric(self.sim, self.switch, profile, cfg.base_latency,
                             cfg.reorder_unit, EventLog(log_enabled))
        self.servers = []
        for i in range(cfg.n_servers):
            srv = MetadataServer(i, self.sim, cfg)
            srv.fabric = self.fabric
            srv.install_root()
            self.fabric.register(srv.addr, srv)
            self.servers.append(srv)
        self.clients = []
        for i in range(cfg.n_clients):
            cl = Client(i, self.sim, cfg, self.fabric)
            self.fabric.register(cl.addr, cl)
            self.clients.append(cl)
        self.op_barrier: Future | None = None

    # ------------------------------------------------------------------ state

    def canonical_state(self) -> dict:
        inodes: dict = {}
        entries: dict = {}
        for s in self.servers:
            i2, e2 = s.canonical_contribution()
            inodes.update(i2)
            entries.update(e2)
        return {"inodes": inodes, "entries": entries}

    def pending_total(self) -> int:
        return sum(s.pending_total() for s in self.servers)

    def _dirty_fps(self) -> set[int]:
        dirty: set[int] = set()
        for s in self.servers:
            dirty |= s.dirty_groups()
            dirty |= {fp for fp, ships in s.pending_imports.items() if ships}
        return dirty

    def owner_of_fp(self, fp: int) -> MetadataServer:
        return self.servers[fp % self.cfg.n_servers]

    # ----------------------------------------------------------------- quiesce

    def quiesce(self, max_rounds: int = 80) -> bool:
        """Fault-free drain: run timers and in-flight work to completion,
        then force-aggregate every group with pending entries or a set
        fingerprint until nothing is scattered anywhere."""
        self.fabric.set_profile(FaultProfile())
        self.sim.run_until_idle()
        for _ in range(max_rounds):
            dirty = self._dirty_fps()
            for index, _stage, tag in self.staleset.snapshot()[0]:
                dirty.add((index << 32) | tag)
            if not dirty:
                return True
            for fp in sorted(dirty):
                self.owner_of_fp(fp).request_aggregation(fp)
            self.sim.run_until_idle()
        return False

    # ------------------------------------------------------------- switch loss

    def recover_switch(self):
        """Simulate switch failure: all switch state is lost, operations
        block, every server flushes pending change-logs, owners aggregate
        everything, and only then does traffic resume against the freshly
        cleared set."""
        if self.op_barrier is not None:
            return
        self.op_barrier = Future(self.sim)
        self.switch.crashed = True
        self.sim.spawn(self._switch_recovery())

    def _switch_recovery(self):
        yield self.sim.sleep(self.cfg.recovery_delay)
        self.staleset.clear()
        self.switch.crashed = False
        for _ in range(80):
            dirty = self._dirty_fps()
            if not dirty:
                break
            yield gather(self.sim, [
                self.owner_of_fp(fp).request_aggregation(fp) for fp in sorted(dirty)
            ])
        barrier, self.op_barrier = self.op_barrier, None
        barrier.resolve(None)


def compare_states(expected: dict, actual: dict) -> str | None:
    for section in ("inodes", "entries"):
        e, a = expected[section], actual[section]
        for k in sorted(set(e) | set(a)):
            if e.get(k) != a.get(k):
                return f"{section}[{k}]: model={e.get(k)!r} system={a.get(k)!r}"
    return None


class Driver:
    def __init__(self, cluster: Cluster, spec: WorkloadSpec):
        self.cluster = cluster
        self.spec = spec
        self.src = OpSource(spec)
        self.model = ReferenceModel()
        self.dir_ids: dict[str, bytes] = {"/": ROOT_ID}
        self.latencies: list[int] = []
        self.per_op_rows: list[tuple] = []
        self.spot_failures: list[str] = []
        self.indeterminate: list[tuple[OpDesc, int]] = []
        self.ops_issued = 0
        self.ops_failed = 0
        self.first_issue = 0
        self.last_completion = 0
        self.run_profile = cluster.fabric.profile

    # ------------------------------------------------------------------ drive

    def run(self):
        self.cluster.sim.spawn(self._main())
        self.cluster.sim.run_until_idle()

    def _main(self):
        c0 = self.cluster.clients[0]
        self.cluster.fabric.set_profile(FaultProfile())  # scaffolding is fault-free
        for op in self.src.setup_ops():
            errno, res, ts = yield from c0.mkdir(op.path, perms=op.perms)
            if errno is Errno.EEXIST:
                errno, res, _ = yield from c0.lookup(op.path)
            assert errno is Errno.OK, f"setup mkdir failed: {errno}"
            new_id = unh(res["id"])
            self.dir_ids[op.path] = new_id
            pid, name = self._split(op.path)
            self.model.mkdir(pid, name, op.perms, ts, new_id)
        self.cluster.fabric.set_profile(self.run_profile)
        self.first_issue = self.cluster.sim.now
        for w in range(self.spec.inflight):
            self.cluster.sim.spawn(self._worker(w))

    def _worker(self, w: int):
        client = self.cluster.clients[w % len(self.cluster.clients)]
        sim = self.cluster.sim
        while True:
            bar = self.cluster.op_barrier
            if bar is not None:
                yield bar
                continue
            op = self.src.next()
            if op is None:
                if self.src.remaining <= 0:
                    return
                yield sim.sleep(500)
                continue
            t0 = sim.now
            errno, res, ts = yield from self._execute(client, op)
            self._complete(op, errno, res, ts, t0, sim.now)

    def _execute(self, client: Client, op: OpDesc):
        k = op.kind
        if k == "create":
            return client.create(op.path, perms=op.perms)
        if k == "mkdir":
            return client.mkdir(op.path, perms=op.perms)
        if k == "delete":
            return client.delete(op.path)
        if k == "rmdir":
            return client.rmdir(op.path)
        if k == "rename":
            return client.rename(op.path, op.dst_path)
        if k == "stat":
            return client.stat(op.path)
        if k == "statdir":
            return client.statdir(op.path)
        if k == "readdir":
            return client.readdir(op.path)
        if k == "open":
            return client.open(op.path)
        return client.close(op.path)

    # -------------------------------------------------------------- completion

    def _split(self, path: str) -> tuple[bytes, bytes]:
        if path == "/":
            return ROOT_ID, b""
        d, name = path.rsplit("/", 1)
        return self.dir_ids[d or "/"], name.encode()

    def _complete(self, op: OpDesc, errno: Errno, res: dict, ts: int, t0: int, t1: int):
        self.ops_issued += 1
        indet = errno is Errno.EIO
        self.src.complete(op, errno is Errno.OK, indeterminate=indet)
        self.per_op_rows.append((self.ops_issued, op.kind, t0, t1, t1 - t0, int(errno)))
        if indet:
            self.indeterminate.append((op, ts))
            self.ops_failed += 1
            return
        if errno is Errno.OK:
            self.latencies.append(t1 - t0)
            self.last_completion = max(self.last_completion, t1)
        else:
            self.ops_failed += 1
        self._apply_model(op, errno, res, ts)

    def _apply_model(self, op: OpDesc, errno: Errno, res: dict, ts: int):
        m = self.model
        k = op.kind
        if k == "rename":
            spid, sname = self._split(op.path)
            dpid, dname = self._split(op.dst_path)
            merr, _ = m.rename(spid, sname, dpid, dname, ts)
        else:
            pid, name = self._split(op.path)
            if k == "create":
                merr, _ = m.create(pid, name, op.perms, ts)
            elif k == "mkdir":
                new_id = unh(res["id"]) if errno is Errno.OK and "id" in res else b""
                merr, mres = m.mkdir(pid, name, op.perms, ts, new_id)
                if merr is Errno.OK:
                    self.dir_ids[op.path] = new_id
            elif k == "delete":
                merr, _ = m.delete(pid, name, ts)
            elif k == "rmdir":
                merr, _ = m.rmdir(pid, name, ts)
            elif k == "stat":
                merr, mres = m.stat(pid, name)
            elif k == "statdir":
                merr, mres = m.statdir(pid, name)
            elif k == "readdir":
                merr, mres = m.readdir(pid, name)
            elif k == "open":
                merr, _ = m.open(pid, name)
            else:
                merr, _ = m.close(pid, name)
        if merr is not errno:
            self.spot_failures.append(
                f"{k} {op.path}: model errno {merr.name}, system {errno.name}")
            return
        if errno is not Errno.OK:
            return
        if k == "statdir":
            got = {f: res[f] for f in ("size", "mtime", "ctime", "perms")}
            want = {f: mres[f] for f in ("size", "mtime", "ctime", "perms")}
            if got != want:
                self.spot_failures.append(f"statdir {op.path}: {got} != {want}")
        elif k == "readdir":
            want = [[n.hex(), kind] for n, kind in mres["names"]]
            if res["names"] != want:
                self.spot_failures.append(
                    f"readdir {op.path}: {res['names']} != {want}")
        elif k == "stat":
            got = {f: res[f] for f in ("kind", "mtime", "ctime", "perms", "size")}
            want = {f: mres[f] for f in ("kind", "mtime", "ctime", "perms", "size")}
            if got != want:
                self.spot_failures.append(f"stat {op.path}: {got} != {want}")

    # --------------------------------------------------------------- reconcile

    def reconcile(self):
        """Resolve indeterminate (retry-exhausted) operations by probing
        the quiesced system state, the standard way to close unknown
        outcomes in a history check."""
        state = self.cluster.canonical_state()["inodes"]
        m = self.model
        for op, ts in self.indeterminate:
            if op.kind in ("stat", "statdir", "readdir", "open", "close"):
                continue
            if op.kind == "rename":
                spid, sname = self._split(op.path)
                dpid, dname = self._split(op.dst_path)
                dk = InodeKey(dpid, dname).encode()
                if dk.hex() in state and dk not in m.inodes:
                    m.rename(spid, sname, dpid, dname, ts)
                continue
            pid, name = self._split(op.path)
            kenc = InodeKey(pid, name).encode()
            applied = kenc.hex() in state
            in_model = kenc in m.inodes
            if op.kind == "create" and applied and not in_model:
                m.create(pid, name, op.perms, ts)
            elif op.kind == "mkdir" and applied and not in_model:
                m.mkdir(pid, name, op.perms, ts, unh(state[kenc.hex()][1]))
            elif op.kind == "delete" and not applied and in_model:
                m.delete(pid, name, ts)
            elif op.kind == "rmdir" and not applied and in_model:
                m.rmdir(pid, name, ts)


@dataclass
class RunResult:
    verdict: bool
    divergence: str | None
    metrics: dict
    cluster: Cluster = field(repr=False, default=None)
    driver: Driver = field(repr=False, default=None)


def run_workload(spec: WorkloadSpec, cfg: ClusterConfig | None = None,
                 profile: FaultProfile | None = None, *,
                 crash_server_at: tuple[int, int] | None = None,
                 switch_crash_after: int | None = None,
                 client_max_tries: int = 12,
                 log_enabled: bool = False) -> RunResult:
    cfg = cfg or ClusterConfig()
    cfg.n_clients = max(cfg.n_clients, spec.inflight)
    profile = profile if profile is not None else FaultProfile(seed=spec.seed)
    cluster = Cluster(cfg, profile, log_enabled)
    for c in cluster.clients:
        c.max_tries = client_max_tries
    if crash_server_at is not None:
        idx, k = crash_server_at
        cluster.servers[idx].crash_after_wal_appends(k)
    if switch_crash_after is not None:
        cluster.sim.schedule(switch_crash_after, cluster.recover_switch)
    driver = Driver(cluster, spec)
    driver.run()

    quiesced = cluster.quiesce()
    driver.reconcile()
    divergence = compare_states(driver.model.canonical_state(), cluster.canonical_state())
    pending = cluster.pending_total()
    set_left = cluster.staleset.occupancy()
    verdict = (
        quiesced and divergence is None and not driver.spot_failures
        and pending == 0 and set_left == 0
    )
    if divergence is None and driver.spot_failures:
        divergence = driver.spot_failures[0]
    if divergence is None and not quiesced:
        divergence = "quiesce did not converge"
    if divergence is None and (pending or set_left):
        divergence = f"residual pending={pending} staleset={set_left}"

    lat = sorted(driver.latencies)
    completed = driver.ops_issued - driver.ops_failed
    window = max(1, driver.last_completion - driver.first_issue)
    metrics = {
        "verdict": "PASS" if verdict else "FAIL",
        "ops_issued": driver.ops_issued,
        "ops_completed": completed,
        "ops_failed": driver.ops_failed,
        "throughput_ops_per_sec": completed * 1_000_000 / window,
        "latency_us": {
            "mean": sum(lat) / len(lat) if lat else 0.0,
            "p50": lat[len(lat) // 2] if lat else 0,
            "p99": lat[min(len(lat) - 1, int(0.99 * len(lat)))] if lat else 0,
        },
        "per_server_ops": [sum(s.stats["ops"].values()) for s in cluster.servers],
        "per_server_inodes": [len(s.store) for s in cluster.servers],
        "aggregations": sum(s.stats["aggregations"] for s in cluster.servers),
        "fallbacks": sum(s.stats["fallbacks"] for s in cluster.servers),
        "pushes": sum(s.stats["pushes"] for s in cluster.servers),
        "lease_expired": sum(s.stats["lease_expired"] for s in cluster.servers),
        "live_high_water": max(s.changelogs.live_high_water for s in cluster.servers),
        "switch": cluster.switch.counters(),
        "indeterminate_ops": len(driver.indeterminate),
        "spot_failures": len(driver.spot_failures),
        "sim_time_us": cluster.sim.now,
    }
    return RunResult(verdict, divergence, metrics, cluster, driver)
