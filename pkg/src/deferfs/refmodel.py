"""Reference model: a strictly synchronous in-memory filesystem.

The harness applies every completed operation here in completion order;
quiesced cluster state must match this model byte for byte, and each
directory read is spot-checked against it at its completion point. The
model is deliberately simple-minded (dicts and loops, no protocol) so it
can serve as an independent oracle.
"""

from __future__ import annotations

from .core import ROOT_ID, ROOT_KEY, InodeKey, KIND_DIR, KIND_FILE
from .errors import Errno

X_BIT = 0o100


class ReferenceModel:
    def __init__(self):
        self.inodes: dict[bytes, list] = {}  # key bytes -> [kind, id, mtime, ctime, perms, size]
        self.entries: dict[bytes, dict[bytes, tuple]] = {}  # dir id -> name -> (kind, perms)
        self.key_of: dict[bytes, bytes] = {}  # dir id -> its inode key bytes
        self.removed: set[bytes] = set()
        root = ROOT_KEY.encode()
        self.inodes[root] = [KIND_DIR, ROOT_ID, 0, 0, 0o755, 0]
        self.entries[ROOT_ID] = {}
        self.key_of[ROOT_ID] = root

    # -- helpers ----------------------------------------------------------

    def _dir_alive(self, dir_id: bytes) -> bool:
        return dir_id in self.entries and dir_id not in self.removed

    def _touch(self, dir_id: bytes, ts: int) -> None:
        rec = self.inodes[self.key_of[dir_id]]
        rec[2] = max(rec[2], ts)

    def _resize(self, dir_id: bytes, delta: int) -> None:
        self.inodes[self.key_of[dir_id]][5] += delta

    def ancestors(self, dir_id: bytes) -> list[bytes]:
        chain = []
        cur = dir_id
        while cur != ROOT_ID:
            chain.append(cur)
            key, _ = InodeKey.decode(self.key_of[cur])
            cur = key.pid
        chain.append(ROOT_ID)
        return chain

    # -- operations ---------------------------------------------------------

    def create(self, pid: bytes, name: bytes, perms: int, ts: int):
        if not self._dir_alive(pid):
            return Errno.ENOENT, {}
        key = InodeKey(pid, name).encode()
        if key in self.inodes:
            return Errno.EEXIST, {}
        self.inodes[key] = [KIND_FILE, b"", ts, ts, perms, 0]
        self.entries[pid][name] = (KIND_FILE, perms)
        self._resize(pid, 1)
        self._touch(pid, ts)
        return Errno.OK, {}

    def mkdir(self, pid: bytes, name: bytes, perms: int, ts: int, new_id: bytes):
        if not self._dir_alive(pid):
            return Errno.ENOENT, {}
        key = InodeKey(pid, name).encode()
        if key in self.inodes:
            return Errno.EEXIST, {}
        self.inodes[key] = [KIND_DIR, new_id, ts, ts, perms, 0]
        self.entries[pid][name] = (KIND_DIR, perms)
        self.entries[new_id] = {}
        self.key_of[new_id] = key
        self._resize(pid, 1)
        self._touch(pid, ts)
        return Errno.OK, {"id": new_id}

    def delete(self, pid: bytes, name: bytes, ts: int):
        key = InodeKey(pid, name).encode()
        rec = self.inodes.get(key)
        if rec is None or not self._dir_alive(pid):
            return Errno.ENOENT, {}
        if rec[0] != KIND_FILE:
            return Errno.EPERM, {}
        del self.inodes[key]
        del self.entries[pid][name]
        self._resize(pid, -1)
        self._touch(pid, ts)
        return Errno.OK, {}

    def rmdir(self, pid: bytes, name: bytes, ts: int):
        key = InodeKey(pid, name).encode()
        rec = self.inodes.get(key)
        if rec is None or not self._dir_alive(pid):
            return Errno.ENOENT, {}
        if rec[0] != KIND_DIR:
            return Errno.ENOTDIR, {}
        dir_id = rec[1]
        if self.entries.get(dir_id):
            return Errno.ENOTEMPTY, {}
        del self.inodes[key]
        del self.entries[pid][name]
        self.entries.pop(dir_id, None)
        self.removed.add(dir_id)
        self._resize(pid, -1)
        self._touch(pid, ts)
        return Errno.OK, {}

    def stat(self, pid: bytes, name: bytes):
        key = InodeKey(pid, name).encode()
        rec = self.inodes.get(key)
        if rec is None or not self._dir_alive(pid):
            return Errno.ENOENT, {}
        kind, _id, mtime, ctime, perms, size = rec
        return Errno.OK, {"kind": kind, "mtime": mtime, "ctime": ctime, "perms": perms, "size": size}

    def statdir(self, pid: bytes, name: bytes):
        if pid == ROOT_ID and name == b"":
            rec = self.inodes[ROOT_KEY.encode()]
        else:
            if not self._dir_alive(pid):
                return Errno.ENOENT, {}
            rec = self.inodes.get(InodeKey(pid, name).encode())
        if rec is None:
            return Errno.ENOENT, {}
        if rec[0] != KIND_DIR:
            return Errno.ENOTDIR, {}
        return Errno.OK, {"mtime": rec[2], "ctime": rec[3], "perms": rec[4], "size": rec[5]}

    def readdir(self, pid: bytes, name: bytes):
        err, info = self.statdir(pid, name)
        if err is not Errno.OK:
            return err, {}
        if pid == ROOT_ID and name == b"":
            dir_id = ROOT_ID
        else:
            dir_id = self.inodes[InodeKey(pid, name).encode()][1]
        listing = sorted((n, k[0]) for n, k in self.entries[dir_id].items())
        return Errno.OK, {"names": listing}

    def open(self, pid: bytes, name: bytes):
        err, _ = self.stat(pid, name)
        return err, {}

    def close(self, pid: bytes, name: bytes):
        return Errno.OK, {}

    def lookup(self, pid: bytes, name: bytes):
        key = InodeKey(pid, name).encode()
        rec = self.inodes.get(key)
        if rec is None or not self._dir_alive(pid):
            return Errno.ENOENT, {}
        return Errno.OK, {"kind": rec[0], "id": rec[1], "perms": rec[4]}

    def rename(self, spid: bytes, sname: bytes, dpid: bytes, dname: bytes, ts: int):
        skey = InodeKey(spid, sname).encode()
        dkey = InodeKey(dpid, dname).encode()
        rec = self.inodes.get(skey)
        if rec is None or not self._dir_alive(spid) or not self._dir_alive(dpid):
            return Errno.ENOENT, {}
        if dkey in self.inodes:
            return Errno.EEXIST, {}
        if rec[0] == KIND_DIR and rec[1] in self.ancestors(dpid):
            return Errno.ELOOP, {}
        del self.inodes[skey]
        rec[3] = max(rec[3], ts)  # moved inode: ctime advances
        self.inodes[dkey] = rec
        kind, perms = self.entries[spid].pop(sname)
        self.entries[dpid][dname] = (kind, perms)
        if rec[0] == KIND_DIR:
            self.key_of[rec[1]] = dkey
        self._resize(spid, -1)
        self._resize(dpid, 1)
        self._touch(spid, ts)
        self._touch(dpid, ts)
        return Errno.OK, {}

    # -- comparison -----------------------------------------------------------

    def canonical_state(self) -> dict:
        inodes = {
            k.hex(): (r[0], r[1].hex(), r[2], r[3], r[4], r[5]) for k, r in self.inodes.items()
        }
        entries = {
            d.hex() + "/" + n.hex(): (kind, perms)
            for d, names in self.entries.items()
            for n, (kind, perms) in names.items()
        }
        return {"inodes": inodes, "entries": entries}
