"""Deterministic discrete-event core: virtual clock, ordered queue, seeded RNG.

Time is integer microseconds. Events that share a fire time are processed
in insertion order, so a run is a pure function of (event program, seed).
"""

from __future__ import annotations

import math
from heapq import heappop as _heappop, heappush as _heappush
from typing import Callable

SimTime = int  # microseconds since simulation start

US_PER_MS = 1_000
US_PER_SEC = 1_000_000

_MASK64 = (1 << 64) - 1
_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MIX1 = 0xBF58476D1CE4E5B9
_SM64_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)
_TWO_PI = 2.0 * math.pi


class RandomSource:
    """splitmix64 pseudo-random source.

    The raw 64-bit stream is the splitmix64 reference algorithm (Steele et
    al., as used by Java's SplittableRandom), computed with Python integers,
    so a given seed yields the same draws on every platform and interpreter.
    Float transforms (uniform, normal) are derived from that stream with
    plain arithmetic; no platform RNG is involved.
    """

    __slots__ = ("seed", "_state")

    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK64
        self._state = self.seed

    def next_u64(self) -> int:
        self._state = (self._state + _SM64_GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _SM64_MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _SM64_MIX2) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_int(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def normal(self) -> float:
        """Standard normal via Box-Muller; always consumes two u64 draws."""
        u1 = ((self.next_u64() >> 11) + 1) * _INV_2_53  # (0, 1]
        u2 = (self.next_u64() >> 11) * _INV_2_53        # [0, 1)
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def spawn(self, stream: int) -> "RandomSource":
        """Independent child source; deterministic function of (seed, stream)."""
        child = RandomSource((self.seed ^ (stream * _SM64_GAMMA)) & _MASK64)
        child.next_u64()
        return child


class EventHandle:
    """Ticket for a scheduled event; lets the owner cancel it."""

    __slots__ = ("_entry",)

    def __init__(self, entry: list) -> None:
        self._entry = entry

    @property
    def pending(self) -> bool:
        return self._entry[2] is not None

    @property
    def fire_time(self) -> SimTime:
        return self._entry[0]


class Engine:
    """Single-threaded event loop over integer-microsecond virtual time.

    Queue entries are [fire_time, tiebreak, action]; the tiebreak is a
    strictly increasing insertion counter, so equal-time events run FIFO.
    Cancellation clears the action slot; cleared entries are skipped (and
    not counted) when popped.
    """

    def __init__(self, seed: int = 0) -> None:
        self.now: SimTime = 0
        self.rng = RandomSource(seed)
        self.events_processed = 0
        self._heap: list[list] = []
        self._tiebreak = 0

    def schedule(self, at: SimTime, action: Callable[[SimTime], None]) -> EventHandle:
        """Enqueue `action` to run at virtual time `at` (must not be in the past)."""
        if at < self.now:
            raise ValueError(
                f"cannot schedule event at t={at} us: clock is already at {self.now} us"
            )
        entry = [at, self._tiebreak, action]
        self._tiebreak += 1
        _heappush(self._heap, entry)
        return EventHandle(entry)

    def schedule_in(self, delay: SimTime, action: Callable[[SimTime], None]) -> EventHandle:
        return self.schedule(self.now + delay, action)

    def cancel(self, handle: EventHandle) -> bool:
        """Cancel a pending event. Returns whether it was still pending."""
        entry = handle._entry
        if entry[2] is None:
            return False
        entry[2] = None
        return True

    def next_event_time(self) -> SimTime | None:
        """Fire time of the earliest pending event, or None if the queue is drained."""
        heap = self._heap
        while heap and heap[0][2] is None:
            _heappop(heap)
        return heap[0][0] if heap else None

    def step(self) -> bool:
        """Run the single earliest pending event. Returns False on an empty queue."""
        heap = self._heap
        while heap:
            entry = _heappop(heap)
            action = entry[2]
            if action is None:
                continue
            entry[2] = None
            self.now = entry[0]
            self.events_processed += 1
            action(self.now)
            return True
        return False

    def run_until(self, t_end: SimTime) -> int:
        """Process every event with fire_time <= t_end; leave the clock at t_end."""
        if t_end < self.now:
            raise ValueError(f"cannot run to t={t_end} us: clock is already at {self.now} us")
        heap = self._heap
        processed = 0
        while heap and heap[0][0] <= t_end:
            entry = _heappop(heap)
            action = entry[2]
            if action is None:
                continue
            entry[2] = None
            self.now = entry[0]
            self.events_processed += 1
            processed += 1
            action(self.now)
        self.now = t_end
        return processed
