"""Per-server write-ahead log.

Record layout: 8-byte LSN | 1-byte kind | 4-byte body length | body |
4-byte CRC32 of all preceding bytes of the record. Replay walks records
in order and truncates at the first torn or corrupt record.

The log's byte buffer plays the role of the durable medium: a crashed
server object is discarded but its WalLog survives and seeds recovery.
"""

from __future__ import annotations

import json
import zlib
from enum import IntEnum

_FIXED = 13  # lsn + kind + length


class WalKind(IntEnum):
    OP_LOG = 1
    CHANGELOG_APPEND = 2
    CHANGELOG_APPLIED = 3
    AGG_IMPORT = 4


class WalLog:
    def __init__(self):
        self.data = bytearray()
        self.next_lsn = 1

    def append(self, kind: WalKind, body: dict) -> int:
        lsn = self.next_lsn
        self.next_lsn += 1
        doc = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        rec = lsn.to_bytes(8, "big") + bytes([kind]) + len(doc).to_bytes(4, "big") + doc
        rec += zlib.crc32(rec).to_bytes(4, "big")
        self.data += rec
        return lsn

    def records(self) -> list[tuple[int, WalKind, dict]]:
        """All valid records in LSN order, stopping at the first torn or
        corrupt one (torn-tail truncation)."""
        out = []
        buf = bytes(self.data)
        off = 0
        last_lsn = 0
        while off + _FIXED + 4 <= len(buf):
            length = int.from_bytes(buf[off + 9 : off + 13], "big")
            end = off + _FIXED + length + 4
            if end > len(buf):
                break
            rec = buf[off : end - 4]
            crc = int.from_bytes(buf[end - 4 : end], "big")
            if zlib.crc32(rec) != crc:
                break
            lsn = int.from_bytes(rec[0:8], "big")
            if lsn <= last_lsn:
                break
            try:
                kind = WalKind(rec[8])
            except ValueError:
                break
            body = json.loads(rec[_FIXED:])
            out.append((lsn, kind, body))
            last_lsn = lsn
            off = end
        return out

    def truncate_tail(self, nbytes: int) -> None:
        """Chop nbytes off the end (simulates a torn final write)."""
        del self.data[max(0, len(self.data) - nbytes) :]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.data)

    @staticmethod
    def load(path) -> "WalLog":
        log = WalLog()
        with open(path, "rb") as f:
            log.data = bytearray(f.read())
        recs = log.records()
        log.next_lsn = (recs[-1][0] + 1) if recs else 1
        return log
