"""Metadata server.

Holds the key-value inode store, per-directory change-logs (recast form),
the invalidation list, a write-ahead log, and every operation handler:
double-inode ops that defer the parent update into a change-log and mark
the parent's fingerprint in the switch, directory reads that aggregate
scattered state on demand, the synchronous fallback path for overflowing
inserts, rmdir's collect-and-invalidate fan-out, rename as a presumed-
abort two-phase commit, proactive pushes, and crash recovery by WAL
replay plus state cloning.

Handlers are generator coroutines driven by the simulation kernel. Every
state mutation sits in a no-yield block immediately after its WAL append,
so WAL order equals application order and replay is exact.
"""

from __future__ import annotations

from .changelog import (
    ChangeLogTable,
    InvalidationList,
    OP_CREATE,
    OP_DELETE,
    OP_MKDIR,
    OP_RMDIR_CHILD,
)
from .config import ClusterConfig
from .core import (
    DirEntryRecord,
    Fingerprint,
    InodeKey,
    InodeRecord,
    KIND_DIR,
    KIND_FILE,
    ROOT_ID,
    ROOT_KEY,
    directory_id,
    fingerprint_of,
    owner_of_inode,
)
from .errors import Errno
from .sim import Cpu, Future, RWLock, Simulator, first, gather
from .wal import WalKind, WalLog
from .wire import (
    Op,
    PORT_PLAIN,
    PORT_STALESET,
    Packet,
    SetOp,
    SetRet,
    StaleSetHeader,
    decode_msg,
    encode_msg,
    h,
    server_addr,
    unh,
)

IN_FLIGHT = object()

_CLOP = {Op.CREATE: OP_CREATE, Op.MKDIR: OP_MKDIR, Op.DELETE: OP_DELETE, Op.RMDIR: OP_RMDIR_CHILD}
_PUTS = (OP_CREATE, OP_MKDIR)
_CLIENT_OPS = frozenset(
    {Op.LOOKUP, Op.STAT, Op.OPEN, Op.CLOSE, Op.CREATE, Op.DELETE, Op.MKDIR, Op.RMDIR,
     Op.STATDIR, Op.READDIR, Op.RENAME}
)


def _ship_doc(dir_id: bytes, fp: int, maxts: int, items) -> dict:
    return {
        "dir": h(dir_id),
        "fp": fp,
        "maxts": maxts,
        "e": [[eid[0], eid[1], op, h(name), perms] for eid, op, name, perms in items],
    }


class MetadataServer:
    def __init__(self, idx: int, sim: Simulator, cfg: ClusterConfig, wal: WalLog | None = None):
        self.idx = idx
        self.addr = server_addr(idx)
        self.sim = sim
        self.cfg = cfg
        self.fabric = None  # wired by the cluster
        self.cpu = Cpu(sim)
        self.wal = wal or WalLog()
        self.alive = True
        self.recovering = False
        self.generation = 0
        self.uid = 0x8000 + idx
        self.wal_appends = 0
        self._crash_at_wal = None
        self.stats = {
            "ops": {},
            "aggregations": 0,
            "fallbacks": 0,
            "pushes": 0,
            "lease_expired": 0,
            "dropped_requests": 0,
        }
        self.lock_trace: list[tuple] = []
        # Incarnation-scoped counters. These survive crash() the way a
        # durably persisted epoch would: request ids, remove sequence
        # numbers and transaction ids must never be reused across
        # incarnations or stale traffic could be taken for fresh.
        self.rid_ctr = 0
        self.remove_seq = 0
        self._reset_state()

    # ------------------------------------------------------------------ state

    def _reset_state(self):
        self.store: dict[bytes, InodeRecord] = {}
        self.entries: dict[bytes, dict[bytes, tuple]] = {}
        self.id_key: dict[bytes, bytes] = {}
        self.changelogs = ChangeLogTable()
        self.inval = InvalidationList()
        self.relocations: dict[bytes, int] = {}
        self.applied_eids: set[tuple] = set()
        self.dedup: dict[int, object] = {}
        self.key_locks: dict[bytes, RWLock] = {}
        self.cl_locks: dict[int, RWLock] = {}
        self.groups: dict[int, dict] = {}
        self.pending_imports: dict[int, list] = {}
        self.grace_timers: dict[int, object] = {}
        self.idle_timers: dict[bytes, object] = {}
        self.pending_unlock: dict[int, dict] = {}
        self.pending_reply: dict[int, Future] = {}
        self.collect_holds: dict[int, dict] = {}
        self.prepared: dict[tuple, dict] = {}
        self.txn_done: set[tuple] = set()
        self.coord: dict[tuple, dict] = {}
        self.txn_inflight: set[tuple] = set()
        self.ack_wait: dict[int, Future] = {}
        self.entry_ctr = 0  # rebuilt exactly from the WAL on recovery

    def install_root(self):
        if owner_of_inode(ROOT_KEY, self.cfg.n_servers, self.cfg.hash) == self.idx:
            kenc = ROOT_KEY.encode()
            self.store[kenc] = InodeRecord(ROOT_KEY, KIND_DIR, ROOT_ID, 0, 0, 0o755, 0)
            self.entries[ROOT_ID] = {}
            self.id_key[ROOT_ID] = kenc

    # ------------------------------------------------------------------ infra

    def spawn(self, gen) -> Future:
        return self.sim.spawn(self._guarded(gen))

    def _guarded(self, gen):
        g = self.generation
        val = None
        while True:
            if not self.alive or self.generation != g:
                gen.close()
                return None
            try:
                fut = gen.send(val)
            except StopIteration as stop:
                return stop.value
            val = yield fut

    def _timer(self, delay: int, fn):
        g = self.generation
        return self.sim.schedule(
            delay, lambda: fn() if (self.alive and self.generation == g) else None
        )

    def _key_lock(self, kenc: bytes) -> RWLock:
        lock = self.key_locks.get(kenc)
        if lock is None:
            lock = self.key_locks[kenc] = RWLock(self.sim)
        return lock

    def _cl_lock(self, fp: int) -> RWLock:
        lock = self.cl_locks.get(fp)
        if lock is None:
            lock = self.cl_locks[fp] = RWLock(self.sim)
        return lock

    def _group(self, fp: int) -> dict:
        g = self.groups.get(fp)
        if g is None:
            g = self.groups[fp] = {"running": False, "queue": [], "done": None}
        return g

    def _trace(self, tag, rid, space, keyb):
        self.lock_trace.append((tag, rid, space, keyb))

    def _wal_put(self, kind: WalKind, body: dict) -> None:
        self.wal.append(kind, body)
        self.wal_appends += 1
        if self._crash_at_wal is not None and self.wal_appends >= self._crash_at_wal:
            self._crash_at_wal = None
            self.crash()

    def _next_rid(self) -> int:
        self.rid_ctr += 1
        return (self.uid << 48) | self.rid_ctr

    def _next_eid(self) -> tuple:
        self.entry_ctr += 1
        return (self.idx, self.entry_ctr)

    def _send(self, pkt: Packet):
        if self.alive:
            self.fabric.send(pkt)

    def _send_plan(self, dst: str, plan):
        fp_int, payload = plan
        if fp_int is None:
            self._send(Packet(self.addr, dst, PORT_PLAIN, None, payload))
        else:
            hdr = StaleSetHeader(op=SetOp.INSERT, sender=self.idx, fp=Fingerprint.from_int(fp_int))
            self._send(Packet(self.addr, dst, PORT_STALESET, hdr, payload))

    def respond(self, dst: str, op: Op, rid: int, err: Errno, body: dict | None = None,
                *, insert_fp: int | None = None, unlock_tokens=None):
        doc = {"err": int(err)}
        if body:
            doc.update(body)
        payload = encode_msg(op, rid, doc, response=True)
        plan = (insert_fp, payload)
        self.dedup[rid] = plan
        if unlock_tokens:
            lease = self._timer(self.cfg.key_lease, lambda: self._lease_fire(rid))
            self.pending_unlock[rid] = {"tokens": unlock_tokens, "lease": lease}
        self._send_plan(dst, plan)

    def _lease_fire(self, rid: int):
        if rid in self.pending_unlock:
            self.stats["lease_expired"] += 1
            self._release_unlock(rid)

    def _release_unlock(self, rid: int):
        ent = self.pending_unlock.pop(rid, None)
        if ent is None:
            return
        ent["lease"].cancel()
        for tok in ent["tokens"]:
            tok.lock.release(tok)

    def _rpc(self, dst: str, op: Op, body: dict, *, tries: int, timeout: int,
             port: int = PORT_PLAIN, header: StaleSetHeader | None = None):
        """Send a request and await its response, resending on timeout.
        Returns the response body dict, or None after exhausting tries."""
        rid = self._next_rid()
        fut = Future(self.sim)
        self.pending_reply[rid] = fut
        payload = encode_msg(op, rid, body)
        for _ in range(tries):
            if not self.alive:
                break
            self._send(Packet(self.addr, dst, port, header, payload))
            kind, val = yield first(self.sim, fut, timeout)
            if kind == "ok":
                self.pending_reply.pop(rid, None)
                return val[1]
        self.pending_reply.pop(rid, None)
        return None

    # ------------------------------------------------------------------ dispatch

    def on_packet(self, pkt: Packet):
        if not self.alive:
            return
        op, rid, is_resp, body = decode_msg(pkt.payload)
        if is_resp:
            hdr = pkt.header
            if hdr is not None and hdr.op == SetOp.INSERT and hdr.ret == SetRet.OVERFLOW:
                self.stats["fallbacks"] += 1
                self.spawn(self._h_fallback(pkt, op, rid, body))
                return
            if rid in self.pending_unlock:
                self._release_unlock(rid)
                return
            fut = self.pending_reply.get(rid)
            if fut is not None:
                fut.resolve((op, body))
            return
        if op == Op.AGG_ACK:
            self._h_agg_ack(pkt, rid, body)
            return
        if op == Op.TXN_STATUS:
            self._h_txn_status(pkt, op, rid, body)
            return
        if self.recovering and op in _CLIENT_OPS:
            self.stats["dropped_requests"] += 1
            return
        cached = self.dedup.get(rid)
        if cached is IN_FLIGHT:
            return
        if cached is not None:
            self._send_plan(pkt.src, cached)
            return
        self.dedup[rid] = IN_FLIGHT
        if op in _CLIENT_OPS:
            self.stats["ops"][op.name] = self.stats["ops"].get(op.name, 0) + 1
        handler = self._dispatch(op)
        if handler is None:
            self.respond(pkt.src, op, rid, Errno.EIO)
            return
        self.spawn(handler(pkt, op, rid, body))

    def _dispatch(self, op: Op):
        return {
            Op.CREATE: self._h_double,
            Op.MKDIR: self._h_double,
            Op.DELETE: self._h_double,
            Op.RMDIR: self._h_rmdir,
            Op.STATDIR: self._h_dirread,
            Op.READDIR: self._h_dirread,
            Op.LOOKUP: self._h_single,
            Op.STAT: self._h_single,
            Op.OPEN: self._h_single,
            Op.CLOSE: self._h_single,
            Op.RENAME: self._h_rename,
            Op.COLLECT: self._h_collect,
            Op.PUSH: self._h_push,
            Op.FALLBACK_UNLOCK: self._h_fb_unlock,
            Op.CLONE_STATE: self._h_clone,
            Op.PREPARE: self._h_prepare,
            Op.COMMIT: self._h_commit,
            Op.ABORT: self._h_abort,
            Op.AGG_FORCE: self._h_agg_force,
        }.get(op)

    # ------------------------------------------------------------------ checks

    def _validate(self, trail, pid: bytes | None = None, pfp: int | None = None) -> Errno:
        for t in trail:
            if t in self.inval:
                return Errno.ESTALE
        if pid is not None and pfp is not None:
            rel = self.relocations.get(pid)
            if rel is not None and rel != pfp:
                return Errno.ESTALE
        return Errno.OK

    # ------------------------------------------------------------- double-inode

    def _op_response_body(self, w: dict) -> dict:
        body = {
            "cl": w["cl"],
            "pb": {
                "dir": w["pid"],
                "pfp": w["pfp"],
                "eid": list(w["eid"]),
                "op": _CLOP[Op(w["op"])],
                "name": w["name"],
                "perms": w["perms"],
                "ts": w["ts"],
                "origin": self.idx,
            },
        }
        if "id" in w:
            body["id"] = w["id"]
        return body

    def _h_double(self, pkt: Packet, op: Op, rid: int, body: dict):
        pid, name = unh(body["pid"]), unh(body["name"])
        key = InodeKey(pid, name)
        kenc = key.encode()
        trail = [unh(t) for t in body["trail"]]
        pfp, ts, perms = body["pfp"], body["ts"], body.get("perms", 0o644)
        c = self.cfg.costs

        tcl = yield self._cl_lock(pfp).acquire("r")
        self._trace(op.name, rid, "cl", pfp)
        tk = yield self._key_lock(kenc).acquire("w")
        self._trace(op.name, rid, "key", kenc)
        yield self.cpu.run(c.validate)

        err = self._validate(trail, pid, pfp)
        rec = self.store.get(kenc)
        if err is Errno.OK:
            if op in (Op.CREATE, Op.MKDIR) and rec is not None:
                err = Errno.EEXIST
            elif op == Op.DELETE:
                if rec is None:
                    err = Errno.ENOENT
                elif rec.kind != KIND_FILE:
                    err = Errno.EPERM
        if err is not Errno.OK:
            tcl.lock.release(tcl)
            tk.lock.release(tk)
            self.respond(pkt.src, op, rid, err)
            return

        eid = self._next_eid()
        w = {
            "t": "op", "op": int(op), "rid": rid, "cl": pkt.src,
            "pid": body["pid"], "name": body["name"],
            "perms": perms, "ts": ts, "pfp": pfp, "eid": list(eid),
        }
        if op == Op.MKDIR:
            w["id"] = h(directory_id(self.cfg.hash.seed, pid, name, rid))
        yield self.cpu.run(c.wal_append + c.kv_put + c.log_append)
        self._wal_put(WalKind.OP_LOG, w)
        if not self.alive:
            return
        # modify (atomic with the WAL append: no yields in between)
        if op == Op.CREATE:
            self.store[kenc] = InodeRecord(key, KIND_FILE, None, ts, ts, perms, 0)
        elif op == Op.MKDIR:
            new_id = unh(w["id"])
            self.store[kenc] = InodeRecord(key, KIND_DIR, new_id, ts, ts, perms, 0)
            self.entries[new_id] = {}
            self.id_key[new_id] = kenc
        else:
            del self.store[kenc]
        self._append_parent_entry(pid, pfp, eid, _CLOP[op], name, perms, ts)
        self.respond(
            pkt.src, op, rid, Errno.OK, self._op_response_body(w),
            insert_fp=pfp, unlock_tokens=[tcl, tk],
        )

    # ------------------------------------------------------------- change-logs

    def _append_parent_entry(self, pid, pfp, eid, clop, name, perms, ts):
        log = self.changelogs.append(pid, pfp, eid, clop, name, perms, ts, self.sim.now)
        if len(log.live) >= self.cfg.push_threshold:
            self._ship_now(pid)
        else:
            self._arm_idle(pid)

    def changelog_append(self, pid, pfp, entry_ts, clop, name, perms=0o644):
        """Standalone change-log append (WAL-logged with its own record
        kind); the integrated op handlers embed the entry in their op-log
        record instead."""
        eid = self._next_eid()
        self._wal_put(WalKind.CHANGELOG_APPEND, {
            "dir": h(pid), "fp": pfp, "eid": list(eid), "op": clop,
            "name": h(name), "perms": perms, "ts": entry_ts,
        })
        if not self.alive:
            return None
        self._append_parent_entry(pid, pfp, eid, clop, name, perms, entry_ts)
        return eid

    def _arm_idle(self, dir_id: bytes, delay: int | None = None):
        if dir_id in self.idle_timers:
            return
        self.idle_timers[dir_id] = self._timer(
            delay if delay is not None else self.cfg.idle_timeout,
            lambda: self._idle_fire(dir_id),
        )

    def _idle_fire(self, dir_id: bytes):
        self.idle_timers.pop(dir_id, None)
        log = self.changelogs.get(dir_id)
        if log is None or not log.live:
            return
        quiet = self.sim.now - log.last_append
        if quiet >= self.cfg.idle_timeout:
            self._ship_now(dir_id)
        else:
            self._arm_idle(dir_id, self.cfg.idle_timeout - quiet)

    def _ship_now(self, dir_id: bytes):
        log = self.changelogs.get(dir_id)
        if log is None or not log.live:
            return
        items = log.ship_live()
        ship = _ship_doc(dir_id, log.fp, log.max_ts, items)
        self.stats["pushes"] += 1
        owner = log.fp % self.cfg.n_servers
        if owner == self.idx:
            self._buffer_push(ship)
        else:
            self.spawn(self._rpc(server_addr(owner), Op.PUSH, {"ship": ship},
                                 tries=10, timeout=self.cfg.collect_retry))

    def _h_push(self, pkt, op, rid, body):
        yield self.cpu.run(self.cfg.costs.log_append)
        self._buffer_push(body["ship"])
        self.respond(pkt.src, op, rid, Errno.OK)

    def _buffer_push(self, ship: dict):
        fp = ship["fp"]
        self.pending_imports.setdefault(fp, []).append(ship)
        self._restart_grace(fp)

    def _restart_grace(self, fp: int):
        old = self.grace_timers.pop(fp, None)
        if old is not None:
            old.cancel()
        self.grace_timers[fp] = self._timer(self.cfg.grace_period, lambda: self._grace_fire(fp))

    def _grace_fire(self, fp: int):
        self.grace_timers.pop(fp, None)
        self.request_aggregation(fp)

    # -------------------------------------------------------------- aggregation

    def request_aggregation(self, fp: int, inval_dir: bytes | None = None) -> Future:
        """Queue into the next aggregation round for the group. Rounds
        never admit latecomers once collections have started: a new
        request during a running round waits for the following one."""
        g = self._group(fp)
        fut = Future(self.sim)
        g["queue"].append((fut, inval_dir))
        if not g["running"]:
            g["running"] = True
            g["done"] = Future(self.sim)
            self.spawn(self._agg_round(fp))
        return fut

    def _agg_round(self, fp: int):
        g = self._group(fp)
        batch = g["queue"]
        g["queue"] = []
        waiters = [f for f, _ in batch]
        inval_dirs = sorted({d for _, d in batch if d is not None})
        self.stats["aggregations"] += 1
        c = self.cfg.costs

        tok = yield self._cl_lock(fp).acquire("w")
        self._trace("AGG", fp, "cl", fp)
        for d in inval_dirs:
            self.inval.add(d, self.sim.now)
        local_ships = [
            _ship_doc(log.dir_id, fp, log.max_ts, log.all_pending())
            for log in self.changelogs.logs_for_fp(fp)
        ]

        others = [s for s in range(self.cfg.n_servers) if s != self.idx]
        replies = yield gather(self.sim, [
            self.spawn(self._rpc(
                server_addr(s), Op.COLLECT,
                {"fp": fp, "inval": [h(d) for d in inval_dirs]},
                tries=self.cfg.collect_max_tries, timeout=self.cfg.collect_retry,
            ))
            for s in others
        ])
        ok = all(r is not None for r in replies)

        acked: dict[int, dict[str, list]] = {}
        if ok:
            ships = local_ships + self.pending_imports.pop(fp, [])
            for r in replies:
                ships.extend(r["ships"])
            new_by_dir: dict[str, list] = {}
            maxts_by_dir: dict[str, int] = {}
            for ship in ships:
                for e in ship["e"]:
                    eid = (e[0], e[1])
                    acked.setdefault(e[0], {}).setdefault(ship["dir"], []).append(list(eid))
                    if eid in self.applied_eids:
                        continue
                    new_by_dir.setdefault(ship["dir"], []).append(e)
                    maxts_by_dir[ship["dir"]] = max(maxts_by_dir.get(ship["dir"], 0), ship["maxts"])
            if new_by_dir:
                new_ships = [
                    {"dir": d, "fp": fp, "maxts": maxts_by_dir[d],
                     "e": sorted(new_by_dir[d], key=lambda e: (e[0], e[1]))}
                    for d in sorted(new_by_dir)
                ]
                n_entries = sum(len(s["e"]) for s in new_ships)
                yield self.cpu.run(c.wal_append + c.inode_txn * len(new_ships) + c.entry_apply * n_entries)
                self._wal_put(WalKind.AGG_IMPORT, {"ships": new_ships})
                if not self.alive:
                    return
                for ship in new_ships:
                    self._apply_import(ship)

            # acknowledgment fan-out: every ack carries the REMOVE with one
            # shared sequence number and traverses the switch before its
            # server unlocks, so the remove precedes any new append.
            self.remove_seq += 1
            seq = self.remove_seq
            rnd = self._next_rid()
            self.ack_wait[rnd] = Future(self.sim)
            ack_pkts = []
            for s in range(self.cfg.n_servers):
                doc = {"fp": fp, "dirs": acked.get(s, {}), "cancel": [], "rnd": rnd}
                hdr = StaleSetHeader(op=SetOp.REMOVE, sender=self.idx, seq=seq,
                                     fp=Fingerprint.from_int(fp))
                ack_pkts.append(Packet(self.addr, server_addr(s), PORT_STALESET, hdr,
                                       encode_msg(Op.AGG_ACK, rnd, doc)))
            selffut = self.ack_wait[rnd]
            for attempt in range(self.cfg.collect_max_tries):
                for p in ack_pkts:
                    self._send(p)
                kind, _ = yield first(self.sim, selffut, 10_000)
                if kind == "ok":
                    break
            else:
                ok = False
            self.ack_wait.pop(rnd, None)
        # local unlock only after the self-acknowledgment confirmed the
        # remove executed (or the round gave up)
        tok.lock.release(tok)

        for f in waiters:
            f.resolve(ok)
        g["running"] = False
        g["done"].resolve(None)
        if g["queue"]:
            g["running"] = True
            g["done"] = Future(self.sim)
            self.spawn(self._agg_round(fp))
        elif self.pending_imports.get(fp):
            self._restart_grace(fp)

    def _apply_import(self, ship: dict):
        """Apply one imported shipment to the directory inode and entry
        list; runs in a no-yield block right after its WAL record."""
        dir_id = unh(ship["dir"])
        items = [((e[0], e[1]), e[2], unh(e[3]), e[4]) for e in ship["e"]]
        for eid, _, _, _ in items:
            self.applied_eids.add(eid)
        kenc = self.id_key.get(dir_id)
        if kenc is None or kenc not in self.store:
            return
        rec = self.store[kenc]
        ents = self.entries.setdefault(dir_id, {})
        delta = 0
        for _, op, name, perms in items:
            if op in _PUTS:
                if name not in ents:
                    delta += 1
                ents[name] = (KIND_DIR if op == OP_MKDIR else KIND_FILE, perms)
            else:
                if name in ents:
                    del ents[name]
                    delta -= 1
        rec.size += delta
        rec.mtime = max(rec.mtime, ship["maxts"])

    def _h_collect(self, pkt, op, rid, body):
        fp = body["fp"]
        tok = yield self._cl_lock(fp).acquire("w")
        self._trace("COLLECT", rid, "cl", fp)
        yield self.cpu.run(self.cfg.costs.collect_reply)
        for d in body.get("inval", []):
            self.inval.add(unh(d), self.sim.now)
        ships = []
        for log in self.changelogs.logs_for_fp(fp):
            items = log.all_pending()
            log.ship_live()
            ships.append(_ship_doc(log.dir_id, fp, log.max_ts, items))
        lease = self._timer(self.cfg.changelog_lease, lambda: self._hold_lease_fire(rid))
        self.collect_holds[rid] = {"tok": tok, "fp": fp, "lease": lease}
        self.respond(pkt.src, op, rid, Errno.OK, {"ships": ships})

    def _hold_lease_fire(self, rid: int):
        hold = self.collect_holds.pop(rid, None)
        if hold is not None:
            self.stats["lease_expired"] += 1
            hold["tok"].lock.release(hold["tok"])

    def _h_agg_ack(self, pkt: Packet, rnd: int, body: dict):
        """Aggregation acknowledgment (arrives after its REMOVE executed
        at the switch): reclaim acknowledged entries, release collection
        locks, cancel invalidations if flagged."""
        for dirhex, eids in body.get("dirs", {}).items():
            log = self.changelogs.get(unh(dirhex))
            if log is not None and eids:
                log.mark_applied([tuple(e) for e in eids])
                self._wal_put(WalKind.CHANGELOG_APPLIED, {"dir": dirhex, "eids": eids})
                if not self.alive:
                    return
        for d in body.get("cancel", []):
            self.inval.discard(unh(d))
        fp = body["fp"]
        for rid in [r for r, hold in self.collect_holds.items() if hold["fp"] == fp]:
            hold = self.collect_holds.pop(rid)
            hold["lease"].cancel()
            hold["tok"].lock.release(hold["tok"])
        fut = self.ack_wait.get(rnd)
        if fut is not None:
            fut.resolve(True)

    def _h_agg_force(self, pkt, op, rid, body):
        ok = yield self.request_aggregation(body["fp"])
        self.respond(pkt.src, op, rid, Errno.OK if ok else Errno.EIO)

    # ------------------------------------------------------------ directory reads

    def _h_dirread(self, pkt: Packet, op: Op, rid: int, body: dict):
        pid, name = unh(body["pid"]), unh(body["name"])
        key = ROOT_KEY if (pid == ROOT_ID and name == b"") else InodeKey(pid, name)
        kenc = key.encode()
        trail = [unh(t) for t in body["trail"]]
        fp = body["fp"]
        ret = pkt.header.ret if pkt.header is not None else SetRet.ABSENT

        g = self.groups.get(fp)
        while g is not None and g["running"]:
            yield g["done"]
            g = self.groups.get(fp)

        tok = yield self._key_lock(kenc).acquire("r")
        self._trace(op.name, rid, "key", kenc)
        yield self.cpu.run(self.cfg.costs.read)
        err = self._validate(trail)
        rec = self.store.get(kenc)
        if err is Errno.OK:
            if rec is None:
                err = Errno.ENOENT
            elif rec.kind != KIND_DIR:
                err = Errno.ENOTDIR
        if err is not Errno.OK:
            tok.lock.release(tok)
            self.respond(pkt.src, op, rid, err)
            return

        if ret == SetRet.PRESENT:
            ok = yield self.request_aggregation(fp)
            if not ok:
                tok.lock.release(tok)
                self.respond(pkt.src, op, rid, Errno.EIO)
                return
            rec = self.store.get(kenc)
            if rec is None:
                tok.lock.release(tok)
                self.respond(pkt.src, op, rid, Errno.ENOENT)
                return

        if op == Op.STATDIR:
            out = {"size": rec.size, "mtime": rec.mtime, "ctime": rec.ctime, "perms": rec.perms}
        else:
            ents = self.entries.get(rec.id, {})
            out = {"names": [[h(n), k] for n, (k, _) in sorted(ents.items())]}
        tok.lock.release(tok)
        self.respond(pkt.src, op, rid, Errno.OK, out)

    # ------------------------------------------------------------ single-inode

    def _h_single(self, pkt: Packet, op: Op, rid: int, body: dict):
        pid, name = unh(body["pid"]), unh(body["name"])
        key = ROOT_KEY if (pid == ROOT_ID and name == b"") else InodeKey(pid, name)
        kenc = key.encode()
        trail = [unh(t) for t in body["trail"]]
        tok = yield self._key_lock(kenc).acquire("r")
        yield self.cpu.run(self.cfg.costs.lookup if op == Op.LOOKUP else self.cfg.costs.read)
        if op == Op.CLOSE:
            tok.lock.release(tok)
            self.respond(pkt.src, op, rid, Errno.OK)
            return
        err = self._validate(trail)
        rec = self.store.get(kenc)
        if err is Errno.OK and rec is None:
            err = Errno.ENOENT
        if err is not Errno.OK:
            tok.lock.release(tok)
            self.respond(pkt.src, op, rid, err)
            return
        if op == Op.LOOKUP:
            out = {"kind": rec.kind, "id": h(rec.id) if rec.id else "", "perms": rec.perms}
        elif op == Op.STAT:
            out = {"kind": rec.kind, "mtime": rec.mtime, "ctime": rec.ctime,
                   "perms": rec.perms, "size": rec.size}
        else:  # OPEN: existence check only
            out = {}
        tok.lock.release(tok)
        self.respond(pkt.src, op, rid, Errno.OK, out)

    # ------------------------------------------------------------------ rmdir

    def _h_rmdir(self, pkt: Packet, op: Op, rid: int, body: dict):
        pid, name = unh(body["pid"]), unh(body["name"])
        key = InodeKey(pid, name)
        kenc = key.encode()
        trail = [unh(t) for t in body["trail"]]
        pfp, ts, sfp = body["pfp"], body["ts"], body["sfp"]
        c = self.cfg.costs

        tk = yield self._key_lock(kenc).acquire("w")
        self._trace(op.name, rid, "key", kenc)
        yield self.cpu.run(c.validate)
        err = self._validate(trail, pid, pfp)
        rec = self.store.get(kenc)
        if err is Errno.OK:
            if rec is None:
                err = Errno.ENOENT
            elif rec.kind != KIND_DIR:
                err = Errno.ENOTDIR
        if err is not Errno.OK:
            tk.lock.release(tk)
            self.respond(pkt.src, op, rid, err)
            return

        dir_id = rec.id
        ok = yield self.request_aggregation(sfp, inval_dir=dir_id)
        if not ok:
            tk.lock.release(tk)
            self.respond(pkt.src, op, rid, Errno.EIO)
            return

        if self.entries.get(dir_id):
            yield self._fanout_inval_cancel(dir_id)
            tk.lock.release(tk)
            self.respond(pkt.src, op, rid, Errno.ENOTEMPTY)
            return
        err = self._validate(trail, pid, pfp)
        if err is not Errno.OK:
            yield self._fanout_inval_cancel(dir_id)
            tk.lock.release(tk)
            self.respond(pkt.src, op, rid, err)
            return

        tcl = yield self._cl_lock(pfp).acquire("r")
        self._trace(op.name, rid, "cl", pfp)
        eid = self._next_eid()
        w = {
            "t": "op", "op": int(op), "rid": rid, "cl": pkt.src,
            "pid": body["pid"], "name": body["name"], "perms": 0,
            "ts": ts, "pfp": pfp, "eid": list(eid), "id": h(dir_id),
        }
        yield self.cpu.run(c.wal_append + c.kv_delete + c.log_append)
        self._wal_put(WalKind.OP_LOG, w)
        if not self.alive:
            return
        del self.store[kenc]
        self.entries.pop(dir_id, None)
        self.id_key.pop(dir_id, None)
        self._append_parent_entry(pid, pfp, eid, OP_RMDIR_CHILD, name, 0, ts)
        self.respond(pkt.src, op, rid, Errno.OK, self._op_response_body(w),
                     insert_fp=pfp, unlock_tokens=[tcl, tk])

    def _fanout_inval_cancel(self, dir_id: bytes) -> Future:
        self.inval.discard(dir_id)
        return gather(self.sim, [
            self.spawn(self._rpc(server_addr(s), Op.FALLBACK_UNLOCK,
                                 {"orid": 0, "dir": h(dir_id), "eids": [], "cancel": True},
                                 tries=10, timeout=self.cfg.collect_retry))
            for s in range(self.cfg.n_servers) if s != self.idx
        ])

    # ---------------------------------------------------------------- fallback

    def _h_fallback(self, pkt: Packet, op: Op, rid: int, body: dict):
        """Synchronous path: an INSERT overflowed, the switch rewrote the
        response to us (the parent directory's owner). Apply the parent
        update immediately, notify the origin to unlock, forward the
        response to the client."""
        pb = body["pb"]
        client = body["cl"]
        dir_id = unh(pb["dir"])
        eid = (pb["eid"][0], pb["eid"][1])
        rel = self.relocations.get(dir_id)
        if rel is not None and rel != pb["pfp"]:
            # directory moved: hand the packet to the current owner
            self._send(pkt.with_(dst=server_addr(rel % self.cfg.n_servers)))
            return
        if eid not in self.applied_eids:
            yield self.cpu.run(self.cfg.costs.inode_txn + self.cfg.costs.wal_append)
            if eid not in self.applied_eids:  # duplicate may have applied meanwhile
                ship = {"dir": pb["dir"], "fp": pb["pfp"], "maxts": pb["ts"],
                        "e": [[eid[0], eid[1], pb["op"], pb["name"], pb["perms"]]]}
                self._wal_put(WalKind.AGG_IMPORT, {"ships": [ship]})
                if not self.alive:
                    return
                self._apply_import(ship)
        else:
            yield self.cpu.run(self.cfg.costs.validate)
        self._send(Packet(self.addr, server_addr(pb["origin"]), PORT_PLAIN, None,
                          encode_msg(Op.FALLBACK_UNLOCK, self._next_rid(),
                                     {"orid": rid, "dir": pb["dir"], "eids": [list(eid)],
                                      "cancel": False})))
        self._send(Packet(self.addr, client, PORT_PLAIN, None, pkt.payload))

    def _h_fb_unlock(self, pkt: Packet, op: Op, rid: int, body: dict):
        yield self.cpu.run(self.cfg.costs.log_append)
        if body.get("reloc") is not None:
            self._install_reloc(unh(body["dir"]), body["reloc"])
        elif body.get("cancel"):
            self.inval.discard(unh(body["dir"]))
        else:
            self._release_unlock(body["orid"])
            log = self.changelogs.get(unh(body["dir"]))
            if log is not None and body["eids"]:
                log.mark_applied([tuple(e) for e in body["eids"]])
                self._wal_put(WalKind.CHANGELOG_APPLIED,
                              {"dir": body["dir"], "eids": body["eids"]})
                if not self.alive:
                    return
        self.respond(pkt.src, op, rid, Errno.OK)

    # ------------------------------------------------------------------ rename

    def _pending_for_name(self, pid: bytes, name: bytes) -> dict | None:
        log = self.changelogs.get(pid)
        if log is None:
            return None
        items = [it for it in log.all_pending() if it[2] == name]
        if not items:
            return None
        return _ship_doc(pid, log.fp, log.max_ts, items)

    def _force_agg(self, fp: int):
        owner = fp % self.cfg.n_servers
        if owner == self.idx:
            ok = yield self.request_aggregation(fp)
            return bool(ok)
        res = yield from self._rpc(server_addr(owner), Op.AGG_FORCE, {"fp": fp},
                                   tries=self.cfg.collect_max_tries,
                                   timeout=self.cfg.collect_retry * 2)
        return res is not None and res["err"] == 0

    def _h_rename(self, pkt: Packet, op: Op, rid: int, body: dict):
        spid, sname = unh(body["spid"]), unh(body["sname"])
        dpid, dname = unh(body["dpid"]), unh(body["dname"])
        skey, dkey = InodeKey(spid, sname), InodeKey(dpid, dname)
        ts, kind = body["ts"], body["kind"]
        spk = InodeKey(unh(body["spk"][0]), unh(body["spk"][1]))
        dpk = InodeKey(unh(body["dpk"][0]), unh(body["dpk"][1]))

        if skey == dkey:
            self.respond(pkt.src, op, rid, Errno.EEXIST)
            return
        if kind == KIND_DIR:
            if body["sid"] in body["dtrail"]:
                self.respond(pkt.src, op, rid, Errno.ELOOP)
                return
            for fp in (body["sfp"], body["spfp"], body["dpfp"]):
                ok = yield from self._force_agg(fp)
                if not ok:
                    self.respond(pkt.src, op, rid, Errno.EIO)
                    return

        self.rid_ctr += 1
        txn = (self.idx, self.rid_ctr)
        self.txn_inflight.add(txn)
        pieces = [("src", skey), ("dst", dkey)]
        if spk == dpk:
            pieces.append(("bothparent", spk))
        else:
            pieces.extend([("sparent", spk), ("dparent", dpk)])
        pieces.sort(key=lambda p: p[1].encode())

        info = {
            "skey": [body["spid"], body["sname"]], "dkey": [body["dpid"], body["dname"]],
            "kind": kind, "ts": ts, "strail": body["strail"], "dtrail": body["dtrail"],
        }
        votes = {}
        prepared_roles = []
        failed = None
        for role, key in pieces:
            srv = owner_of_inode(key, self.cfg.n_servers, self.cfg.hash)
            self._trace("2PC", rid, "prep", key.encode())
            res = yield from self._rpc(
                server_addr(srv), Op.PREPARE,
                {"txn": list(txn), "role": role,
                 "key": [h(key.pid), h(key.name)], "info": info},
                tries=self.cfg.collect_max_tries, timeout=self.cfg.collect_retry,
            )
            if res is None or res["err"] != 0:
                failed = Errno.EIO if res is None else Errno(res["err"])
                break
            votes[role] = res
            prepared_roles.append((role, key, srv))
        if failed is not None:
            self.txn_inflight.discard(txn)
            for role, key, srv in prepared_roles:
                yield from self._rpc(server_addr(srv), Op.ABORT,
                                     {"txn": list(txn), "role": role},
                                     tries=self.cfg.collect_max_tries,
                                     timeout=self.cfg.collect_retry)
            self.respond(pkt.src, op, rid, failed)
            return

        src_vote = votes["src"]
        extras = {
            "src": {"key": [body["spid"], body["sname"]], "pid": body["spid"],
                    "dir": kind == KIND_DIR, "sid": body["sid"],
                    "acked": (src_vote.get("ship") or {}).get("e", [])},
            "dst": {"key": [body["dpid"], body["dname"]], "pid": body["dpid"],
                    "rec": src_vote["rec"], "entries": src_vote.get("entries", {}),
                    "sid": body["sid"], "dir": kind == KIND_DIR, "ts": ts,
                    "acked": (votes["dst"].get("ship") or {}).get("e", [])},
        }
        if spk == dpk:
            extras["bothparent"] = {
                "pid": body["spid"], "sname": body["sname"], "dname": body["dname"],
                "kind": kind, "perms": src_vote["rec"][4], "ts": ts,
                "ship_s": src_vote.get("ship"), "ship_d": votes["dst"].get("ship"),
            }
        else:
            extras["sparent"] = {"pid": body["spid"], "name": body["sname"], "ts": ts,
                                 "ship": src_vote.get("ship")}
            extras["dparent"] = {"pid": body["dpid"], "name": body["dname"], "kind": kind,
                                 "perms": src_vote["rec"][4], "ts": ts,
                                 "ship": votes["dst"].get("ship")}
        reloc = None
        if kind == KIND_DIR:
            reloc = {"dir": body["sid"],
                     "fp": fingerprint_of(dpid, dname, self.cfg.hash).as_int}
        piece_list = [[role, h(key.pid), h(key.name), srv] for role, key, srv in prepared_roles]
        yield self.cpu.run(self.cfg.costs.wal_append)
        self._wal_put(WalKind.OP_LOG, {"t": "commit", "txn": list(txn), "rid": rid,
                                       "cl": pkt.src, "extras": extras,
                                       "pieces": piece_list, "reloc": reloc})
        if not self.alive:
            return
        self.txn_inflight.discard(txn)
        self.coord[txn] = {"extras": extras, "pieces": piece_list, "reloc": reloc,
                           "rid": rid, "cl": pkt.src, "done": False}
        committed = yield self._drive_commit(txn)
        self.respond(pkt.src, op, rid, Errno.OK if committed else Errno.EIO)

    def _drive_commit(self, txn: tuple) -> Future:
        return self.sim.spawn(self._guarded(self._drive_commit_gen(txn)))

    def _drive_commit_gen(self, txn: tuple):
        """Push the commit decision to every piece until each one has
        acknowledged; a committed transaction is never left torn."""
        st = self.coord[txn]
        remaining = list(st["pieces"])
        for _ in range(50):
            results = yield gather(self.sim, [
                self.spawn(self._rpc(server_addr(srv), Op.COMMIT,
                                     {"txn": list(txn), "role": role,
                                      "extras": st["extras"][role]},
                                     tries=self.cfg.collect_max_tries,
                                     timeout=self.cfg.collect_retry))
                for role, _, _, srv in remaining
            ])
            remaining = [p for p, r in zip(remaining, results) if r is None]
            if not remaining:
                break
        else:
            return False
        if st["reloc"] is not None:
            targets = [s for s in range(self.cfg.n_servers) if s != self.idx]
            for _ in range(50):
                results = yield gather(self.sim, [
                    self.spawn(self._rpc(server_addr(s), Op.FALLBACK_UNLOCK,
                                         {"orid": 0, "dir": st["reloc"]["dir"],
                                          "eids": [], "cancel": False,
                                          "reloc": st["reloc"]["fp"]},
                                         tries=self.cfg.collect_max_tries,
                                         timeout=self.cfg.collect_retry))
                    for s in targets
                ])
                targets = [s for s, r in zip(targets, results) if r is None]
                if not targets:
                    break
            self._install_reloc(unh(st["reloc"]["dir"]), st["reloc"]["fp"])
        self._wal_put(WalKind.OP_LOG, {"t": "done", "txn": list(txn)})
        st["done"] = True
        return True

    def _h_prepare(self, pkt: Packet, op: Op, rid: int, body: dict):
        txn = tuple(body["txn"])
        role = body["role"]
        if (txn, role) in self.txn_done:
            self.respond(pkt.src, op, rid, Errno.ESTALE)
            return
        key = InodeKey(unh(body["key"][0]), unh(body["key"][1]))
        kenc = key.encode()
        info = body["info"]
        tok = yield self._key_lock(kenc).acquire("w")
        self._trace("PREP", rid, "key", kenc)
        yield self.cpu.run(self.cfg.costs.rename_piece)
        if (txn, role) in self.txn_done:
            tok.lock.release(tok)
            self.respond(pkt.src, op, rid, Errno.ESTALE)
            return

        rec = self.store.get(kenc)
        err = Errno.OK
        vote: dict = {}
        if role == "src":
            err = self._validate([unh(t) for t in info["strail"]])
            if err is Errno.OK:
                if rec is None:
                    err = Errno.ENOENT
                elif rec.kind != info["kind"]:
                    err = Errno.ESTALE
                else:
                    vote["rec"] = [rec.kind, h(rec.id) if rec.id else "", rec.mtime,
                                   rec.ctime, rec.perms, rec.size]
                    if rec.kind == KIND_DIR:
                        vote["entries"] = {h(n): [k, p] for n, (k, p) in
                                           self.entries.get(rec.id, {}).items()}
                    ship = self._pending_for_name(key.pid, key.name)
                    if ship:
                        vote["ship"] = ship
        elif role == "dst":
            err = self._validate([unh(t) for t in info["dtrail"]])
            if err is Errno.OK and rec is not None:
                err = Errno.EEXIST
            if err is Errno.OK:
                ship = self._pending_for_name(key.pid, key.name)
                if ship:
                    vote["ship"] = ship
        else:  # parent pieces: the directory inode must be live here
            if rec is None or rec.kind != KIND_DIR or rec.id in self.inval:
                err = Errno.ENOENT if rec is None else Errno.ESTALE
        if err is not Errno.OK:
            tok.lock.release(tok)
            self.respond(pkt.src, op, rid, err)
            return

        yield self.cpu.run(self.cfg.costs.wal_append)
        self._wal_put(WalKind.OP_LOG, {"t": "prep", "txn": list(txn), "role": role,
                                       "key": body["key"]})
        if not self.alive:
            return
        self.prepared[(txn, role)] = {"tok": tok, "key": kenc}
        self._arm_txn_poll(txn, role)
        self.respond(pkt.src, op, rid, Errno.OK, vote)

    def _arm_txn_poll(self, txn: tuple, role: str):
        """Termination protocol: if no decision arrives, ask the
        coordinator for the outcome rather than hold the lock forever."""
        def fire():
            if (txn, role) in self.prepared:
                self.spawn(self._poll_txn(txn, role))
        self._timer(self.cfg.txn_poll_timeout, fire)

    def _h_commit(self, pkt: Packet, op: Op, rid: int, body: dict):
        txn = tuple(body["txn"])
        role = body["role"]
        if (txn, role) in self.txn_done:
            self.respond(pkt.src, op, rid, Errno.OK)
            return
        yield self.cpu.run(self.cfg.costs.rename_piece + self.cfg.costs.wal_append)
        if (txn, role) in self.txn_done:
            self.respond(pkt.src, op, rid, Errno.OK)
            return
        self._wal_put(WalKind.OP_LOG, {"t": "piece", "txn": list(txn), "role": role,
                                       "extras": body["extras"]})
        if not self.alive:
            return
        self._apply_piece(txn, role, body["extras"])
        self.respond(pkt.src, op, rid, Errno.OK)

    def _finish_txn(self, txn: tuple, role: str):
        self.txn_done.add((txn, role))
        st = self.prepared.pop((txn, role), None)
        if st is not None and st.get("tok") is not None:
            st["tok"].lock.release(st["tok"])

    def _apply_piece(self, txn: tuple, role: str, ex: dict):
        """Commit one rename piece. No yields: atomic with its WAL record."""
        if role == "src":
            kenc = InodeKey(unh(ex["key"][0]), unh(ex["key"][1])).encode()
            self.store.pop(kenc, None)
            if ex["dir"] and ex["sid"]:
                sid = unh(ex["sid"])
                if self.id_key.get(sid) == kenc:
                    self.entries.pop(sid, None)
                    self.id_key.pop(sid, None)
            self._mark_acked(unh(ex["pid"]), ex.get("acked", []))
        elif role == "dst":
            key = InodeKey(unh(ex["key"][0]), unh(ex["key"][1]))
            kenc = key.encode()
            kind, idhex, mtime, ctime, perms, size = ex["rec"]
            rec = InodeRecord(key, kind, unh(idhex) if idhex else None, mtime,
                              max(ctime, ex["ts"]), perms, size)
            self.store[kenc] = rec
            if ex["dir"] and ex["sid"]:
                sid = unh(ex["sid"])
                self.entries[sid] = {unh(n): (k, p) for n, (k, p) in ex["entries"].items()}
                self.id_key[sid] = kenc
            self._mark_acked(unh(ex["pid"]), ex.get("acked", []))
        elif role in ("sparent", "dparent", "bothparent"):
            pid = unh(ex["pid"])
            for shipkey in ("ship", "ship_s", "ship_d"):
                ship = ex.get(shipkey)
                if ship:
                    self._apply_import(ship)
            kenc = self.id_key.get(pid)
            rec = self.store.get(kenc) if kenc else None
            ents = self.entries.get(pid)
            if rec is not None and ents is not None:
                if role in ("sparent", "bothparent"):
                    name = unh(ex["name"] if role == "sparent" else ex["sname"])
                    if name in ents:
                        del ents[name]
                        rec.size -= 1
                if role in ("dparent", "bothparent"):
                    name = unh(ex["name"] if role == "dparent" else ex["dname"])
                    if name not in ents:
                        rec.size += 1
                    ents[name] = (ex["kind"], ex["perms"])
                rec.mtime = max(rec.mtime, ex["ts"])
        self._finish_txn(txn, role)

    def _mark_acked(self, pid: bytes, acked: list):
        if not acked:
            return
        log = self.changelogs.get(pid)
        if log is not None:
            eids = [(e[0], e[1]) for e in acked]
            log.mark_applied(eids)
            self._wal_put(WalKind.CHANGELOG_APPLIED,
                          {"dir": h(pid), "eids": [list(e) for e in eids]})

    def _h_abort(self, pkt: Packet, op: Op, rid: int, body: dict):
        txn = tuple(body["txn"])
        role = body["role"]
        yield self.cpu.run(self.cfg.costs.wal_append)
        if (txn, role) not in self.txn_done:
            self._wal_put(WalKind.OP_LOG, {"t": "abortp", "txn": list(txn), "role": role})
            if not self.alive:
                return
            self._finish_txn(txn, role)
        self.respond(pkt.src, op, rid, Errno.OK)

    def _h_txn_status(self, pkt: Packet, op: Op, rid: int, body: dict):
        txn = tuple(body["txn"])
        st = self.coord.get(txn)
        if st is not None:
            doc = {"err": 0, "dec": "commit", "extras": st["extras"].get(body["role"])}
        elif txn in self.txn_inflight:
            doc = {"err": 0, "dec": "pending"}
        else:
            doc = {"err": 0, "dec": "abort"}  # presumed abort: no commit record
        self._send(Packet(self.addr, pkt.src, PORT_PLAIN, None,
                          encode_msg(op, rid, doc, response=True)))

    def _poll_txn(self, txn: tuple, role: str):
        while True:
            if not self.alive or (txn, role) not in self.prepared:
                return
            res = yield from self._rpc(server_addr(txn[0]), Op.TXN_STATUS,
                                       {"txn": list(txn), "role": role},
                                       tries=20, timeout=self.cfg.collect_retry * 2)
            if res is not None and res["dec"] != "pending":
                break
            yield self.sim.sleep(self.cfg.txn_poll_timeout)
        if (txn, role) in self.txn_done or (txn, role) not in self.prepared:
            return  # the decision arrived while we were asking
        if res["dec"] == "commit":
            self._wal_put(WalKind.OP_LOG, {"t": "piece", "txn": list(txn), "role": role,
                                           "extras": res["extras"]})
            if not self.alive:
                return
            self._apply_piece(txn, role, res["extras"])
        else:
            self._wal_put(WalKind.OP_LOG, {"t": "abortp", "txn": list(txn), "role": role})
            if not self.alive:
                return
            self._finish_txn(txn, role)

    def _install_reloc(self, dir_id: bytes, fp: int):
        self.relocations[dir_id] = fp
        log = self.changelogs.get(dir_id)
        if log is not None:
            log.fp = fp
            if log.live:
                self._ship_now(dir_id)

    # ---------------------------------------------------------------- recovery

    def _h_clone(self, pkt: Packet, op: Op, rid: int, body: dict):
        yield self.cpu.run(self.cfg.costs.read)
        self.respond(pkt.src, op, rid, Errno.OK, {
            "inval": {h(d): ts for d, ts in self.inval.snapshot().items()},
            "reloc": {h(d): fp for d, fp in self.relocations.items()},
        })

    def crash(self, auto_recover: bool = True):
        """Lose all DRAM state; the WAL byte buffer survives."""
        self.generation += 1
        self.alive = False
        self._crash_at_wal = None
        self._reset_state()
        if auto_recover:
            self.sim.schedule(self.cfg.recovery_delay, self.recover)

    def crash_after_wal_appends(self, n: int):
        self._crash_at_wal = self.wal_appends + n

    def recover(self):
        """Rebuild from the WAL (redo, skipping change-logs already marked
        applied), then clone the invalidation list and relocations from a
        live peer before serving client traffic again."""
        self._reset_state()
        self.install_root()
        self.alive = True
        self.recovering = True
        max_eid = 0
        for _, kind, w in self.wal.records():
            if kind == WalKind.OP_LOG:
                max_eid = max(max_eid, self._replay_op(w))
            elif kind == WalKind.CHANGELOG_APPEND:
                eid = (w["eid"][0], w["eid"][1])
                max_eid = max(max_eid, eid[1])
                self.changelogs.append(unh(w["dir"]), w["fp"], eid, w["op"],
                                       unh(w["name"]), w["perms"], w["ts"], 0)
            elif kind == WalKind.CHANGELOG_APPLIED:
                log = self.changelogs.get(unh(w["dir"]))
                if log is not None:
                    log.mark_applied([tuple(e) for e in w["eids"]])
            elif kind == WalKind.AGG_IMPORT:
                for ship in w["ships"]:
                    self._apply_import(ship)
        self.entry_ctr = max_eid
        for (txn, role), st in list(self.prepared.items()):
            fut = self._key_lock(st["key"]).acquire("w")
            st["tok"] = fut.value  # fresh lock: granted immediately
        self.spawn(self._finish_recovery())

    def _replay_op(self, w: dict) -> int:
        t = w.get("t", "op")
        max_eid = 0
        if t == "op":
            op = Op(w["op"])
            pid, name = unh(w["pid"]), unh(w["name"])
            key = InodeKey(pid, name)
            kenc = key.encode()
            eid = (w["eid"][0], w["eid"][1])
            max_eid = eid[1]
            if op == Op.CREATE:
                self.store[kenc] = InodeRecord(key, KIND_FILE, None, w["ts"], w["ts"],
                                               w["perms"], 0)
            elif op == Op.MKDIR:
                new_id = unh(w["id"])
                self.store[kenc] = InodeRecord(key, KIND_DIR, new_id, w["ts"], w["ts"],
                                               w["perms"], 0)
                self.entries[new_id] = {}
                self.id_key[new_id] = kenc
            elif op == Op.DELETE:
                self.store.pop(kenc, None)
            elif op == Op.RMDIR:
                self.store.pop(kenc, None)
                dir_id = unh(w["id"])
                self.entries.pop(dir_id, None)
                self.id_key.pop(dir_id, None)
            self.changelogs.append(pid, w["pfp"], eid, _CLOP[op], name, w["perms"],
                                   w["ts"], 0)
            self.dedup[w["rid"]] = (
                w["pfp"],
                encode_msg(op, w["rid"], {"err": 0, **self._op_response_body(w)},
                           response=True),
            )
        elif t == "prep":
            self.prepared[(tuple(w["txn"]), w["role"])] = {"key": InodeKey(
                unh(w["key"][0]), unh(w["key"][1])).encode(), "tok": None}
        elif t == "piece":
            txn = tuple(w["txn"])
            self.prepared.pop((txn, w["role"]), None)
            self._apply_piece_replay(txn, w["role"], w["extras"])
        elif t == "abortp":
            txn = tuple(w["txn"])
            self.prepared.pop((txn, w["role"]), None)
            self.txn_done.add((txn, w["role"]))
        elif t == "commit":
            txn = tuple(w["txn"])
            self.rid_ctr = max(self.rid_ctr, txn[1])
            self.coord[txn] = {"extras": w["extras"], "pieces": w["pieces"],
                               "reloc": w["reloc"], "rid": w["rid"], "cl": w["cl"],
                               "done": False}
            self.dedup[w["rid"]] = (None, encode_msg(Op.RENAME, w["rid"], {"err": 0},
                                                     response=True))
        elif t == "done":
            txn = tuple(w["txn"])
            if txn in self.coord:
                self.coord[txn]["done"] = True
        return max_eid

    def _apply_piece_replay(self, txn, role, extras):
        self.txn_done.discard((txn, role))
        self._apply_piece(txn, role, extras)

    def _finish_recovery(self):
        peers = [s for s in range(self.cfg.n_servers) if s != self.idx]
        cloned = len(peers) == 0
        while not cloned:
            for s in peers:
                res = yield from self._rpc(server_addr(s), Op.CLONE_STATE, {},
                                           tries=3, timeout=self.cfg.collect_retry)
                if res is not None:
                    self.inval.load({unh(d): ts for d, ts in res["inval"].items()})
                    for d, fp in res["reloc"].items():
                        self._install_reloc(unh(d), fp)
                    cloned = True
                    break
        self.recovering = False
        for log in self.changelogs.dirty_dirs():
            if log.live:
                self._arm_idle(log.dir_id, 0)
        for (txn, role) in list(self.prepared):
            self.spawn(self._poll_txn(txn, role))
        for txn, st in list(self.coord.items()):
            if not st["done"]:
                self._drive_commit(txn)

    # ------------------------------------------------------------------ reports

    def pending_total(self) -> int:
        return sum(log.pending for log in self.changelogs.logs.values())

    def dirty_groups(self) -> set[int]:
        return {log.fp for log in self.changelogs.dirty_dirs()}

    def canonical_contribution(self) -> tuple[dict, dict]:
        inodes = {
            k.hex(): (r.kind, (r.id or b"").hex(), r.mtime, r.ctime, r.perms, r.size)
            for k, r in self.store.items()
        }
        entries = {
            d.hex() + "/" + n.hex(): (kind, perms)
            for d, names in self.entries.items()
            for n, (kind, perms) in names.items()
        }
        return inodes, entries

    def direntry_records(self) -> list[DirEntryRecord]:
        return [
            DirEntryRecord(InodeKey(d, n), kind, perms)
            for d, names in self.entries.items()
            for n, (kind, perms) in names.items()
        ]
