"""Packet and payload formats.

Traffic uses two UDP-like ports: PORT_PLAIN packets are routed untouched,
PORT_STALESET packets begin with an 18-byte header encoding a stale-set
operation that the switch executes in-line:

    byte 0      op(2 bits) | ret(2 bits) | reserved(4)
    byte 1      sender server index
    bytes 2-9   sequence number, big-endian (remove dedup)
    bytes 10-17 fingerprint, big-endian 64-bit (upper bits zero)

RPC payloads are 1-byte opcode (high bit set on responses), 8-byte request
id big-endian, then a canonical JSON document (sorted keys, byte strings
hex-encoded).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import IntEnum

from .core import Fingerprint

PORT_PLAIN = 9000
PORT_STALESET = 9001

HEADER_LEN = 18


class SetOp(IntEnum):
    NONE = 0
    QUERY = 1
    INSERT = 2
    REMOVE = 3


class SetRet(IntEnum):
    UNSET = 0
    ABSENT = 1
    PRESENT = 2
    OVERFLOW = 3


class Op(IntEnum):
    LOOKUP = 1
    STAT = 2
    OPEN = 3
    CLOSE = 4
    CREATE = 5
    DELETE = 6
    MKDIR = 7
    RMDIR = 8
    STATDIR = 9
    READDIR = 10
    RENAME = 11
    # internal server-to-server traffic
    COLLECT = 32  # aggregation: request a group's change-logs
    PUSH = 33  # proactive change-log push
    AGG_ACK = 34  # aggregation acknowledgment (rides a REMOVE header)
    FALLBACK_UNLOCK = 35  # synchronous-path completion notice to the origin
    CLONE_STATE = 36  # recovery: fetch invalidation list + relocations
    PREPARE = 37  # rename two-phase commit
    COMMIT = 38
    ABORT = 39
    TXN_STATUS = 40
    AGG_FORCE = 41  # ask a directory's owner to aggregate a group now


RESPONSE_BIT = 0x80


def client_addr(i: int) -> str:
    return f"c{i}"


def server_addr(i: int) -> str:
    return f"s{i}"


@dataclass(slots=True)
class StaleSetHeader:
    op: SetOp
    ret: SetRet = SetRet.UNSET
    sender: int = 0
    seq: int = 0
    fp: Fingerprint = Fingerprint(0, 1)

    def encode(self) -> bytes:
        b0 = ((self.op & 0x3) << 6) | ((self.ret & 0x3) << 4)
        return bytes([b0, self.sender & 0xFF]) + self.seq.to_bytes(8, "big") + self.fp.to_bytes()

    @staticmethod
    def decode(raw: bytes) -> "StaleSetHeader":
        if len(raw) < HEADER_LEN:
            raise ValueError("stale-set header truncated")
        if raw[0] & 0x0F:
            raise ValueError("reserved header bits set")
        return StaleSetHeader(
            op=SetOp((raw[0] >> 6) & 0x3),
            ret=SetRet((raw[0] >> 4) & 0x3),
            sender=raw[1],
            seq=int.from_bytes(raw[2:10], "big"),
            fp=Fingerprint.from_bytes(raw[10:18]),
        )


@dataclass(slots=True)
class Packet:
    src: str
    dst: str
    dst_port: int
    header: StaleSetHeader | None
    payload: bytes

    def with_(self, **kw) -> "Packet":
        return replace(self, **kw)

    def wire_payload(self) -> bytes:
        """Byte image of the UDP payload (header, if any, then RPC bytes)."""
        head = self.header.encode() if self.header is not None else b""
        return head + self.payload


def encode_msg(op: Op, rid: int, body: dict, *, response: bool = False) -> bytes:
    code = int(op) | (RESPONSE_BIT if response else 0)
    doc = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return bytes([code]) + rid.to_bytes(8, "big") + doc


def decode_msg(raw: bytes) -> tuple[Op, int, bool, dict]:
    code = raw[0]
    op = Op(code & ~RESPONSE_BIT)
    rid = int.from_bytes(raw[1:9], "big")
    body = json.loads(raw[9:]) if len(raw) > 9 else {}
    return op, rid, bool(code & RESPONSE_BIT), body


def peek_opcode(raw: bytes) -> int:
    return raw[0] if raw else -1


# hex helpers for byte-string fields inside JSON bodies
def h(b: bytes) -> str:
    return b.hex()


def unh(s: str) -> bytes:
    return bytes.fromhex(s)
