"""Client library: path resolution against a local metadata cache,
request construction and addressing, timeout/retransmission with
exponential backoff, and cache invalidation on stale replies.

A handle is single-threaded: it issues one operation at a time. Drivers
wanting concurrency hold several handles.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ClusterConfig
from .core import (
    InodeKey,
    KIND_DIR,
    ROOT_ID,
    ROOT_KEY,
    fingerprint_of,
    make_timestamp,
    owner_of_inode,
)
from .errors import Errno
from .sim import Future, Simulator, first
from .wire import (
    Op,
    PORT_PLAIN,
    PORT_STALESET,
    Packet,
    SetOp,
    StaleSetHeader,
    client_addr,
    decode_msg,
    encode_msg,
    h,
    unh,
)

_X = 0o100


@dataclass(slots=True)
class CacheEntry:
    id: bytes | None
    perms: int
    kind: str
    version: int


class Client:
    def __init__(self, uid: int, sim: Simulator, cfg: ClusterConfig, fabric):
        self.uid = uid
        self.addr = client_addr(uid)
        self.sim = sim
        self.cfg = cfg
        self.fabric = fabric
        self.alive = True
        self.cache: dict[tuple[bytes, bytes], CacheEntry] = {}
        self.pending: dict[int, Future] = {}
        self.op_counter = 0
        self.rid_ctr = 0
        self.fetch_version = 0
        self.max_tries = cfg.client_max_tries
        self.stats = {"rpcs": {}, "retransmits": 0, "dup_responses": 0, "estale_retries": 0}

    # ------------------------------------------------------------------ fabric

    def on_packet(self, pkt: Packet):
        op, rid, is_resp, body = decode_msg(pkt.payload)
        if not is_resp:
            return
        fut = self.pending.get(rid)
        if fut is None:
            self.stats["dup_responses"] += 1
            return
        fut.resolve(body)

    def _next_rid(self) -> int:
        self.rid_ctr += 1
        return (self.uid << 48) | self.rid_ctr

    def _request(self, dst: str, op: Op, body: dict, *, port=PORT_PLAIN, header=None):
        """Send and await one request, retransmitting with exponential
        backoff; (EIO, {}) after the retry budget is spent."""
        rid = self._next_rid()
        fut = Future(self.sim)
        self.pending[rid] = fut
        payload = encode_msg(op, rid, body)
        self.stats["rpcs"][op.name] = self.stats["rpcs"].get(op.name, 0) + 1
        timeout = self.cfg.client_timeout
        for attempt in range(self.max_tries):
            if attempt:
                self.stats["retransmits"] += 1
            self.fabric.send(Packet(self.addr, dst, port, header, payload))
            kind, val = yield first(self.sim, fut, timeout)
            if kind == "ok":
                self.pending.pop(rid, None)
                return Errno(val["err"]), val
            timeout = min(timeout * self.cfg.client_backoff, self.cfg.client_backoff_cap)
        self.pending.pop(rid, None)
        return Errno.EIO, {}

    # ------------------------------------------------------------- resolution

    def _fill(self, pid: bytes, name: bytes, id_: bytes | None, perms: int, kind: str):
        self.fetch_version += 1
        self.cache[(pid, name)] = CacheEntry(id_, perms, kind, self.fetch_version)

    def resolve(self, path: str):
        """Walk the path's directory components, returning the leaf's
        parent id, leaf name, the parent directory's own key, the id
        trail, and the cache keys consulted (for targeted eviction)."""
        parts = [p.encode() for p in path.split("/") if p]
        trail = [ROOT_ID]
        used: list[tuple[bytes, bytes]] = []
        cur_id = ROOT_ID
        parent_key = ROOT_KEY
        for comp in parts[:-1] if parts else []:
            ce = self.cache.get((cur_id, comp))
            if ce is None:
                dst = self._owner(InodeKey(cur_id, comp))
                err, res = yield from self._request(dst, Op.LOOKUP, {
                    "pid": h(cur_id), "name": h(comp), "trail": [h(t) for t in trail],
                })
                if err is not Errno.OK:
                    return err, None
                id_ = unh(res["id"]) if res["id"] else None
                self._fill(cur_id, comp, id_, res["perms"], res["kind"])
                ce = self.cache[(cur_id, comp)]
            used.append((cur_id, comp))
            if ce.kind != KIND_DIR or ce.id is None:
                return Errno.ENOTDIR, None
            if not ce.perms & _X:
                return Errno.EACCES, None
            parent_key = InodeKey(cur_id, comp)
            cur_id = ce.id
            trail.append(cur_id)
        ctx = {
            "pid": cur_id,
            "name": parts[-1] if parts else b"",
            "pkey": parent_key,
            "trail": trail,
            "used": used,
        }
        return Errno.OK, ctx

    def _owner(self, key: InodeKey) -> str:
        from .wire import server_addr

        return server_addr(owner_of_inode(key, self.cfg.n_servers, self.cfg.hash))

    def _evict(self, ctx, leaf: tuple[bytes, bytes] | None = None):
        for k in ctx.get("used", []) if ctx else []:
            self.cache.pop(k, None)
        if leaf is not None:
            self.cache.pop(leaf, None)

    # ----------------------------------------------------------------- issue

    def issue(self, op: Op, path: str, *, perms: int = 0o644, dst_path: str | None = None):
        """Resolve, address, send; on a stale reply evict the offending
        cache entries and retry once with fresh resolution. Returns
        (errno, response body, operation timestamp)."""
        self.op_counter += 1
        ts = make_timestamp(self.op_counter, self.uid)
        err = Errno.EIO
        for attempt in (0, 1):
            if op == Op.RENAME:
                err, res = yield from self._issue_rename(path, dst_path, ts)
            else:
                err, res = yield from self._issue_plain(op, path, perms, ts)
            if err is Errno.ESTALE and attempt == 0:
                self.stats["estale_retries"] += 1
                continue
            return err, res, ts
        return err, {}, ts

    def _issue_plain(self, op: Op, path: str, perms: int, ts: int):
        err, ctx = yield from self.resolve(path)
        if err is not Errno.OK:
            if err is Errno.ESTALE:
                self._evict(ctx)
            return err, {}
        pid, name = ctx["pid"], ctx["name"]
        key = ROOT_KEY if name == b"" else InodeKey(pid, name)
        dst = self._owner(key)
        body = {"pid": h(pid), "name": h(name), "trail": [h(t) for t in ctx["trail"]]}
        port, header = PORT_PLAIN, None

        if op in (Op.CREATE, Op.MKDIR, Op.DELETE, Op.RMDIR):
            pfp = fingerprint_of(ctx["pkey"].pid, ctx["pkey"].name, self.cfg.hash).as_int
            body.update({"pfp": pfp, "ts": ts})
            if op in (Op.CREATE, Op.MKDIR):
                body["perms"] = perms
            if op == Op.RMDIR:
                body["sfp"] = fingerprint_of(pid, name, self.cfg.hash).as_int
        elif op in (Op.STATDIR, Op.READDIR):
            fp = fingerprint_of(pid, name, self.cfg.hash)
            body["fp"] = fp.as_int
            port = PORT_STALESET
            header = StaleSetHeader(op=SetOp.QUERY, fp=fp)

        err, res = yield from self._request(dst, op, body, port=port, header=header)
        if err is Errno.ESTALE:
            self._evict(ctx, (pid, name))
            return err, {}
        if err is Errno.OK:
            if op == Op.MKDIR:
                self._fill(pid, name, unh(res["id"]), perms, KIND_DIR)
            elif op == Op.CREATE:
                self._fill(pid, name, None, perms, "file")
            elif op in (Op.DELETE, Op.RMDIR):
                self.cache.pop((pid, name), None)
        return err, res

    def _issue_rename(self, src: str, dst: str, ts: int):
        err, sctx = yield from self.resolve(src)
        if err is not Errno.OK:
            if err is Errno.ESTALE:
                self._evict(sctx)
            return err, {}
        err, dctx = yield from self.resolve(dst)
        if err is not Errno.OK:
            if err is Errno.ESTALE:
                self._evict(dctx)
            return err, {}
        spid, sname = sctx["pid"], sctx["name"]
        dpid, dname = dctx["pid"], dctx["name"]

        ce = self.cache.get((spid, sname))
        if ce is None:
            err, res = yield from self._request(self._owner(InodeKey(spid, sname)), Op.LOOKUP, {
                "pid": h(spid), "name": h(sname),
                "trail": [h(t) for t in sctx["trail"]],
            })
            if err is not Errno.OK:
                if err is Errno.ESTALE:
                    self._evict(sctx, (spid, sname))
                return err, {}
            self._fill(spid, sname, unh(res["id"]) if res["id"] else None,
                       res["perms"], res["kind"])
            ce = self.cache[(spid, sname)]

        skey = InodeKey(spid, sname)
        body = {
            "spid": h(spid), "sname": h(sname), "dpid": h(dpid), "dname": h(dname),
            "strail": [h(t) for t in sctx["trail"]],
            "dtrail": [h(t) for t in dctx["trail"]],
            "ts": ts, "kind": ce.kind,
            "sid": h(ce.id) if ce.id else "",
            "sfp": fingerprint_of(spid, sname, self.cfg.hash).as_int,
            "spfp": fingerprint_of(sctx["pkey"].pid, sctx["pkey"].name, self.cfg.hash).as_int,
            "dpfp": fingerprint_of(dctx["pkey"].pid, dctx["pkey"].name, self.cfg.hash).as_int,
            "spk": [h(sctx["pkey"].pid), h(sctx["pkey"].name)],
            "dpk": [h(dctx["pkey"].pid), h(dctx["pkey"].name)],
        }
        coord = "s0" if ce.kind == KIND_DIR else self._owner(skey)
        err, res = yield from self._request(coord, Op.RENAME, body)
        if err is Errno.ESTALE:
            self._evict(sctx, (spid, sname))
            self._evict(dctx, (dpid, dname))
            return err, {}
        if err is Errno.OK:
            self.cache.pop((spid, sname), None)
            self._fill(dpid, dname, ce.id, ce.perms, ce.kind)
        return err, res

    # ------------------------------------------------------------- public API

    def create(self, path, perms=0o644):
        return self.issue(Op.CREATE, path, perms=perms)

    def mkdir(self, path, perms=0o755):
        return self.issue(Op.MKDIR, path, perms=perms)

    def delete(self, path):
        return self.issue(Op.DELETE, path)

    def rmdir(self, path):
        return self.issue(Op.RMDIR, path)

    def stat(self, path):
        return self.issue(Op.STAT, path)

    def statdir(self, path):
        return self.issue(Op.STATDIR, path)

    def readdir(self, path):
        return self.issue(Op.READDIR, path)

    def open(self, path):
        return self.issue(Op.OPEN, path)

    def close(self, path):
        return self.issue(Op.CLOSE, path)

    def rename(self, src, dst):
        return self.issue(Op.RENAME, src, dst_path=dst)

    def lookup(self, path):
        return self.issue(Op.LOOKUP, path)
