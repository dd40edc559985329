"""On-path network element.

Every packet in the fabric passes through here once per delivered copy.
Plain-port packets are forwarded untouched. Stale-set-port packets have
their header op executed against the register set; query/insert results
are written into the ret field, successful inserts are multicast to the
destination and back to the originating server (the unlock notification),
and overflowing inserts are rewritten toward the parent directory's owner
server for synchronous fallback handling.
"""

from __future__ import annotations

from dataclasses import replace

from .staleset import InsertResult, StaleSet
from .wire import Packet, SetOp, SetRet, StaleSetHeader, server_addr, PORT_PLAIN, PORT_STALESET


class Switch:
    def __init__(self, staleset: StaleSet, n_servers: int):
        self.staleset = staleset
        self.n_servers = n_servers
        self.crashed = False
        self.forwarded = 0
        self.duplicated = 0
        self.rewritten = 0
        self.dropped_malformed = 0
        self.dropped_crashed = 0

    def owner_of_fp(self, fp) -> str:
        return server_addr(fp.as_int % self.n_servers)

    def process(self, pkt: Packet) -> list[Packet]:
        if self.crashed:
            self.dropped_crashed += 1
            return []
        if pkt.dst_port == PORT_PLAIN:
            self.forwarded += 1
            return [pkt]
        if pkt.dst_port != PORT_STALESET or pkt.header is None:
            self.dropped_malformed += 1
            return []

        hdr = pkt.header
        if hdr.op == SetOp.QUERY:
            present = self.staleset.query(hdr.fp)
            ret = SetRet.PRESENT if present else SetRet.ABSENT
            self.forwarded += 1
            return [pkt.with_(header=replace(hdr, ret=ret))]

        if hdr.op == SetOp.INSERT:
            result = self.staleset.insert(hdr.fp)
            if result is InsertResult.OVERFLOW:
                self.rewritten += 1
                self.forwarded += 1
                return [
                    pkt.with_(
                        dst=self.owner_of_fp(hdr.fp),
                        header=replace(hdr, ret=SetRet.OVERFLOW),
                    )
                ]
            done = replace(hdr, ret=SetRet.PRESENT)
            self.forwarded += 2
            self.duplicated += 1
            return [
                pkt.with_(header=done),  # to the client: operation complete
                pkt.with_(dst=pkt.src, header=done),  # to the origin: unlock
            ]

        if hdr.op == SetOp.REMOVE:
            self.staleset.remove(hdr.fp, hdr.sender, hdr.seq)
            self.forwarded += 1
            return [pkt]

        # SetOp.NONE: header present but nothing to execute
        self.forwarded += 1
        return [pkt]

    def counters(self) -> dict:
        return {
            "forwarded": self.forwarded,
            "duplicated": self.duplicated,
            "rewritten": self.rewritten,
            "dropped_malformed": self.dropped_malformed,
            "dropped_crashed": self.dropped_crashed,
        }


def parse_wire(raw: bytes, dst_port: int) -> StaleSetHeader | None:
    """Parse the optional header from a raw UDP payload image; None means
    the parser rejected it (malformed)."""
    if dst_port != PORT_STALESET:
        return None
    try:
        return StaleSetHeader.decode(raw)
    except ValueError:
        return None
