"""Deterministic discrete-event core: virtual clock, scheduler, seeded RNG.

Time is integer nanoseconds.  Events fire in (due, insertion-sequence)
order, so equal-time events run first-scheduled-first.  All randomness in
the simulator is drawn from the single generator owned by this module,
which makes two runs of the same scenario byte-identical.
"""

from __future__ import annotations

import heapq
import threading
from collections import deque

import numpy as np

NS_PER_S = 1_000_000_000


def s_to_ns(seconds: float) -> int:
    """Convert seconds to the integer-nanosecond clock, rounding to nearest."""
    return int(round(seconds * NS_PER_S))


class SchedulingError(ValueError):
    """Raised when an event is scheduled in the past or cancelled twice."""


class Event:
    """A pending callback.  Handle returned by schedule_at; pass to cancel()."""

    __slots__ = ("due", "seq", "action", "cancelled")

    def __init__(self, due, seq, action):
        self.due = due
        self.seq = seq
        self.action = action
        self.cancelled = False

    def __repr__(self):
        return "Event(due=%d, seq=%d, %s)" % (self.due, self.seq, _name(self.action))


def _name(action):
    return getattr(action, "__qualname__", None) or getattr(action, "__name__", "?")


class Simulator:
    """Virtual clock plus event queue.

    External commands (network clients, CLI) never touch state directly:
    they go through submit(), and the queue is drained between events on
    the simulation thread.
    """

    def __init__(self, seed: int = 0, trace: bool = False):
        self.now = 0  # ns
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._heap = []
        self._seq = 0
        self._commands = deque()
        self._cmd_lock = threading.Lock()
        # bookkeeping for the no-event-loss invariant
        self.n_scheduled = 0
        self.n_fired = 0
        self.n_cancelled = 0
        self.trace = [] if trace else None

    # -- scheduling ---------------------------------------------------------

    def schedule_at(self, due: int, action) -> Event:
        """Register action to fire at virtual time due (ns). due must be >= now."""
        if due < self.now:
            raise SchedulingError(
                "cannot schedule at %d ns: clock already at %d ns" % (due, self.now)
            )
        ev = Event(int(due), self._seq, action)
        self._seq += 1
        self.n_scheduled += 1
        heapq.heappush(self._heap, (ev.due, ev.seq, ev))
        return ev

    def schedule_after(self, delay: int, action) -> Event:
        return self.schedule_at(self.now + int(delay), action)

    def cancel(self, ev: Event) -> None:
        if ev.cancelled:
            raise SchedulingError("event cancelled twice: %r" % (ev,))
        ev.cancelled = True
        self.n_cancelled += 1

    @property
    def n_pending(self) -> int:
        return self.n_scheduled - self.n_fired - self.n_cancelled

    def next_due(self):
        """Due time of the earliest live event, or None."""
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    # -- execution ----------------------------------------------------------

    def advance_until(self, t_end: int) -> int:
        """Fire every event with due <= t_end in (due, seq) order.

        The clock never moves past the next pending event, and lands exactly
        on t_end when the queue is drained.  Returns the number fired.
        """
        if t_end < self.now:
            raise SchedulingError(
                "cannot advance to %d ns: clock already at %d ns" % (t_end, self.now)
            )
        fired = 0
        while self._heap:
            due, seq, ev = self._heap[0]
            if ev.cancelled:
                heapq.heappop(self._heap)
                continue
            if due > t_end:
                break
            heapq.heappop(self._heap)
            self.now = due
            self._drain_commands()
            self.n_fired += 1
            if self.trace is not None:
                self.trace.append((due, seq, _name(ev.action)))
            ev.action()
            fired += 1
        self.now = t_end
        self._drain_commands()
        return fired

    def run_until(self, predicate, t_limit: int, step: int = 1_000_000) -> bool:
        """Advance in step-sized slices until predicate() or t_limit. Test helper."""
        while not predicate():
            if self.now >= t_limit:
                return False
            self.advance_until(min(self.now + step, t_limit))
        return True

    # -- external command queue ---------------------------------------------

    def submit(self, fn) -> None:
        """Thread-safe: queue fn to run on the sim thread between events."""
        with self._cmd_lock:
            self._commands.append(fn)

    def _drain_commands(self) -> None:
        while True:
            with self._cmd_lock:
                if not self._commands:
                    return
                fn = self._commands.popleft()
            fn()
