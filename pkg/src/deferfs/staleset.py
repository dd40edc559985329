"""Software model of the on-switch set-associative fingerprint set.

The set is a column of S register stages, each an array of 2^I 32-bit
registers; register value 0 means empty. A fingerprint occupies at most
one stage at its index. Whole set operations run atomically here, which
is a strict refinement of the hardware's per-stage atomicity plus ordered
execution: every history this model admits is admissible on the pipeline.
"""

from __future__ import annotations

import threading
from enum import Enum

from .core import DEFAULT_INDEX_BITS, Fingerprint

DEFAULT_STAGES = 10


class InsertResult(Enum):
    INSERTED = "inserted"
    ALREADY_PRESENT = "already-present"
    OVERFLOW = "overflow"


class RemoveResult(Enum):
    REMOVED = "removed"
    STALE_DUPLICATE = "stale-duplicate"


class RegisterStage:
    """One stage: an array of 32-bit registers indexed by the fingerprint
    index, supporting the three per-stage register actions."""

    __slots__ = ("registers",)

    def __init__(self, index_bits: int):
        self.registers = {}  # sparse: index -> nonzero tag

    def get(self, index: int) -> int:
        return self.registers.get(index, 0)

    def register_query(self, index: int, tag: int) -> bool:
        return self.registers.get(index, 0) == tag

    def register_conditional_insert(self, index: int, tag: int) -> bool:
        """Write tag if the register is zero; return whether the original
        value was zero or already equal to tag."""
        old = self.registers.get(index, 0)
        if old == 0:
            self.registers[index] = tag
            return True
        return old == tag

    def register_conditional_remove(self, index: int, tag: int) -> None:
        """Zero the register iff it currently holds tag."""
        if self.registers.get(index, 0) == tag:
            del self.registers[index]


class StaleSet:
    """Set of fingerprints of directories with not-yet-applied updates.

    Internally synchronized; callers may invoke operations from any
    thread. Operations sharing an index serialize in arrival order.
    """

    def __init__(self, stages: int = DEFAULT_STAGES, index_bits: int = DEFAULT_INDEX_BITS):
        self.index_bits = index_bits
        self.stages = [RegisterStage(index_bits) for _ in range(stages)]
        self.last_seq: dict[int, int] = {}  # sender server -> largest seq seen
        self._lock = threading.Lock()

    # -- whole set operations -------------------------------------------

    def insert(self, fp: Fingerprint) -> InsertResult:
        """Conditional-insert stage by stage until one succeeds, then
        conditional-remove on the remaining stages so no duplicate tag
        survives. All stages occupied by other tags is an overflow and
        leaves the set unchanged."""
        with self._lock:
            for pos, stage in enumerate(self.stages):
                old = stage.get(fp.index)
                if stage.register_conditional_insert(fp.index, fp.tag):
                    for later in self.stages[pos + 1 :]:
                        later.register_conditional_remove(fp.index, fp.tag)
                    return InsertResult.INSERTED if old == 0 else InsertResult.ALREADY_PRESENT
            return InsertResult.OVERFLOW

    def query(self, fp: Fingerprint) -> bool:
        with self._lock:
            return any(stage.register_query(fp.index, fp.tag) for stage in self.stages)

    def remove(self, fp: Fingerprint, from_server: int, seq: int) -> RemoveResult:
        """Apply a remove only if seq is fresher than anything previously
        seen from the sending server; duplicates have no effect."""
        with self._lock:
            if seq <= self.last_seq.get(from_server, 0):
                return RemoveResult.STALE_DUPLICATE
            self.last_seq[from_server] = seq
            for stage in self.stages:
                stage.register_conditional_remove(fp.index, fp.tag)
            return RemoveResult.REMOVED

    # -- inspection -------------------------------------------------------

    def clear(self) -> None:
        """Drop all state (models a switch reboot: tags and seq table)."""
        with self._lock:
            for stage in self.stages:
                stage.registers.clear()
            self.last_seq.clear()

    def occupancy(self) -> int:
        with self._lock:
            return sum(len(stage.registers) for stage in self.stages)

    def snapshot(self) -> tuple[list[tuple[int, int, int]], dict[int, int]]:
        """Dump for tests: sorted (index, stage, tag) triples + seq table."""
        with self._lock:
            triples = [
                (index, pos, tag)
                for pos, stage in enumerate(self.stages)
                for index, tag in stage.registers.items()
            ]
            triples.sort()
            return triples, dict(self.last_seq)

    def members(self) -> set[tuple[int, int]]:
        """Set of (index, tag) pairs currently stored, for equality checks."""
        with self._lock:
            return {
                (index, tag)
                for stage in self.stages
                for index, tag in stage.registers.items()
            }
