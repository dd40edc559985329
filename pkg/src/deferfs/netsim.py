"""Deterministic in-process message fabric.

Every packet makes two hops: sender -> switch and switch -> destination.
Loss, duplication and reordering are injected on the first hop and loss
and reordering on the second, so each delivered copy traverses the switch
exactly once. Reordering is realized as a bounded random extra delay of
up to reorder_window * reorder_unit microseconds; with a zero window the
fabric is exactly FIFO.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .sim import Simulator
from .switch import Switch
from .wire import Packet

BASE_LATENCY_US = 1000
REORDER_UNIT_US = 250


@dataclass(frozen=True)
class FaultProfile:
    loss: float = 0.0
    dup: float = 0.0
    reorder_window: int = 0
    seed: int = 0

    def __post_init__(self):
        assert 0.0 <= self.loss <= 1.0 and 0.0 <= self.dup <= 1.0
        assert self.reorder_window >= 0


class EventLog:
    """Optional trace: one tuple per fabric event, diffable across runs."""

    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self.entries: list[tuple] = []

    def add(self, tick, kind, src, dst, opcode, fp, ret):
        if self.enabled:
            self.entries.append((tick, kind, src, dst, opcode, fp, ret))

    def lines(self) -> list[str]:
        return [" ".join(str(x) for x in e) for e in self.entries]


def _pkt_fields(pkt: Packet) -> tuple[int, int, int]:
    opcode = pkt.payload[0] if pkt.payload else -1
    if pkt.header is not None:
        return opcode, pkt.header.fp.as_int, int(pkt.header.ret)
    return opcode, 0, 0


class Fabric:
    def __init__(
        self,
        sim: Simulator,
        switch: Switch,
        profile: FaultProfile = FaultProfile(),
        base_latency: int = BASE_LATENCY_US,
        reorder_unit: int = REORDER_UNIT_US,
        log: EventLog | None = None,
    ):
        self.sim = sim
        self.switch = switch
        self.profile = profile
        self.base_latency = base_latency
        self.reorder_unit = reorder_unit
        self.log = log or EventLog()
        self._rng = random.Random(profile.seed)
        self.endpoints: dict[str, object] = {}
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def register(self, addr: str, endpoint) -> None:
        self.endpoints[addr] = endpoint

    def set_profile(self, profile: FaultProfile) -> None:
        """Swap fault parameters mid-run (the RNG stream continues)."""
        self.profile = profile

    def _latency(self) -> int:
        extra = 0
        if self.profile.reorder_window > 0:
            extra = self._rng.randint(0, self.profile.reorder_window) * self.reorder_unit
        return self.base_latency + extra

    def send(self, pkt: Packet) -> None:
        self.sent += 1
        opcode, fp, ret = _pkt_fields(pkt)
        self.log.add(self.sim.now, "send", pkt.src, pkt.dst, opcode, fp, ret)
        copies = 1
        if self._rng.random() < self.profile.loss:
            copies -= 1
        if self._rng.random() < self.profile.dup:
            copies += 1
        if copies == 0:
            self.dropped += 1
            self.log.add(self.sim.now, "drop", pkt.src, pkt.dst, opcode, fp, ret)
            return
        for _ in range(copies):
            self.sim.schedule(self._latency(), lambda p=pkt: self._at_switch(p))

    def _at_switch(self, pkt: Packet) -> None:
        opcode, fp, ret = _pkt_fields(pkt)
        self.log.add(self.sim.now, "switch", pkt.src, pkt.dst, opcode, fp, ret)
        for out in self.switch.process(pkt):
            if self._rng.random() < self.profile.loss:
                self.dropped += 1
                o_op, o_fp, o_ret = _pkt_fields(out)
                self.log.add(self.sim.now, "drop", out.src, out.dst, o_op, o_fp, o_ret)
                continue
            self.sim.schedule(self._latency(), lambda p=out: self._deliver(p))

    def _deliver(self, pkt: Packet) -> None:
        opcode, fp, ret = _pkt_fields(pkt)
        endpoint = self.endpoints.get(pkt.dst)
        if endpoint is None or not getattr(endpoint, "alive", True):
            self.dropped += 1
            self.log.add(self.sim.now, "dead", pkt.src, pkt.dst, opcode, fp, ret)
            return
        self.delivered += 1
        self.log.add(self.sim.now, "deliver", pkt.src, pkt.dst, opcode, fp, ret)
        endpoint.on_packet(pkt)
