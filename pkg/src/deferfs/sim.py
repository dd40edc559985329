"""Deterministic discrete-event kernel.

Single-threaded: a heap of (time, seq) ordered events drives everything.
Protocol handlers are generators that yield Futures; continuations are
re-scheduled as events (never run re-entrantly), so the global order of
execution is a pure function of the event sequence.
"""

from __future__ import annotations

import heapq
from collections import deque


class Event:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn):
        self.fn = fn
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class Future:
    __slots__ = ("sim", "done", "value", "_waiters")

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.done = False
        self.value = None
        self._waiters = []

    def resolve(self, value=None):
        if self.done:
            return
        self.done = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for cb in waiters:
            self.sim.call_soon(lambda cb=cb: cb(self.value))

    def add_done(self, cb):
        if self.done:
            self.sim.call_soon(lambda: cb(self.value))
        else:
            self._waiters.append(cb)


class Simulator:
    def __init__(self):
        self.now = 0  # simulated microseconds
        self._heap: list = []
        self._seq = 0
        self.events_processed = 0

    # -- scheduling -------------------------------------------------------

    def schedule(self, delay: int, fn) -> Event:
        ev = Event(fn)
        heapq.heappush(self._heap, (self.now + delay, self._seq, ev))
        self._seq += 1
        return ev

    def call_soon(self, fn) -> Event:
        return self.schedule(0, fn)

    def sleep(self, dt: int) -> Future:
        fut = Future(self)
        self.schedule(dt, fut.resolve)
        return fut

    # -- generator processes ----------------------------------------------

    def spawn(self, gen) -> Future:
        result = Future(self)
        self._step(gen, result, None)
        return result

    def _step(self, gen, result: Future, send_value):
        try:
            awaited = gen.send(send_value)
        except StopIteration as stop:
            result.resolve(stop.value)
            return
        awaited.add_done(lambda v: self._step(gen, result, v))

    # -- running ------------------------------------------------------------

    def run_until_idle(self, max_events: int = 100_000_000) -> int:
        n = 0
        while self._heap:
            t, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = t
            ev.fn()
            n += 1
            if n > max_events:
                raise RuntimeError("event budget exhausted; likely a livelock")
        self.events_processed += n
        return n

    def advance(self, ticks: int) -> int:
        """Process everything due within the next `ticks` microseconds and
        move the clock exactly that far. Returns events fired."""
        deadline = self.now + ticks
        n = 0
        while self._heap and self._heap[0][0] <= deadline:
            t, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = t
            ev.fn()
            n += 1
        self.now = deadline
        self.events_processed += n
        return n


def first(sim: Simulator, fut: Future, dt: int) -> Future:
    """Race a future against a timeout: resolves to ("ok", value) or
    ("timeout", None), whichever happens first."""
    out = Future(sim)
    timer = sim.schedule(dt, lambda: out.resolve(("timeout", None)))

    def on_done(v):
        timer.cancel()
        out.resolve(("ok", v))

    fut.add_done(on_done)
    return out


def gather(sim: Simulator, futs: list[Future]) -> Future:
    out = Future(sim)
    remaining = len(futs)
    results = [None] * len(futs)
    if remaining == 0:
        out.resolve(results)
        return out

    def done(i, v):
        nonlocal remaining
        results[i] = v
        remaining -= 1
        if remaining == 0:
            out.resolve(results)

    for i, f in enumerate(futs):
        f.add_done(lambda v, i=i: done(i, v))
    return out


class LockToken:
    __slots__ = ("lock", "mode", "released")

    def __init__(self, lock, mode):
        self.lock = lock
        self.mode = mode
        self.released = False


class RWLock:
    """FIFO reader-writer lock for cooperative (generator) tasks."""

    __slots__ = ("sim", "readers", "writer", "_queue")

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.readers = 0
        self.writer = False
        self._queue: deque = deque()

    def acquire(self, mode: str) -> Future:
        fut = Future(self.sim)
        token = LockToken(self, mode)
        if not self._queue and self._grantable(mode):
            self._grant(mode)
            fut.resolve(token)
        else:
            self._queue.append((mode, fut, token))
        return fut

    def _grantable(self, mode: str) -> bool:
        if mode == "r":
            return not self.writer
        return not self.writer and self.readers == 0

    def _grant(self, mode: str):
        if mode == "r":
            self.readers += 1
        else:
            self.writer = True

    def release(self, token: LockToken):
        if token.released:
            return
        token.released = True
        if token.mode == "r":
            self.readers -= 1
        else:
            self.writer = False
        while self._queue:
            mode, fut, tok = self._queue[0]
            if not self._grantable(mode):
                break
            self._queue.popleft()
            self._grant(mode)
            fut.resolve(tok)
            if mode == "w":
                break

    @property
    def held(self) -> bool:
        return self.writer or self.readers > 0 or bool(self._queue)


class Cpu:
    """Serial per-server execution resource: work is FIFO and each unit
    occupies the server for its service time."""

    __slots__ = ("sim", "busy_until")

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.busy_until = 0

    def run(self, cost: int) -> Future:
        start = max(self.sim.now, self.busy_until)
        self.busy_until = start + cost
        fut = Future(self.sim)
        self.sim.schedule(self.busy_until - self.sim.now, fut.resolve)
        return fut
