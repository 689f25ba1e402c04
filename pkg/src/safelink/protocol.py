"""Sender/receiver state machines for the redundant-link emergency stop.

The handheld sender keeps a three-valued command (hard stop / soft stop /
run) and broadcasts it over three radio channels: two fast bidirectional
links at 20 Hz and one slow unidirectional link at roughly 9 Hz. Command
changes go out immediately on every enabled channel. The robot-side
receiver latches the freshest command by sequence number and falls back to
a hard stop whenever no frame at all has arrived for 300 ms. Frames on the
bidirectional channels are answered with rate-limited echoes so the sender
can display per-link health.

Both state machines are pure: every operation takes an explicit `now` and
they never touch the event queue themselves, so they can be embedded in
any single-threaded scheduler (see `harness` for the wiring).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

from .sim import SimTime, US_PER_MS


class ProtocolError(Exception):
    """A state machine was driven outside its contract."""


class EStopCommand(Enum):
    HARD_STOP = "hard_stop"  # motor power must be cut
    SOFT_STOP = "soft_stop"  # power retained, motion inhibited
    RUN = "run"              # power enabled, motion permitted


class ChannelId(Enum):
    FAST_A = "fast_a"  # BLE-class bidirectional link
    FAST_B = "fast_b"  # ESP-NOW-class bidirectional link
    SLOW = "slow"      # LoRa-class unidirectional link (sender -> receiver only)


BIDIRECTIONAL_CHANNELS = frozenset({ChannelId.FAST_A, ChannelId.FAST_B})
ALL_CHANNELS = (ChannelId.FAST_A, ChannelId.FAST_B, ChannelId.SLOW)


class Direction(Enum):
    TO_RECEIVER = "to_receiver"
    TO_SENDER = "to_sender"


class LinkHealth(Enum):
    ALIVE = "alive"
    DEAD = "dead"


class StatusFrame(NamedTuple):
    seq: int
    command: EStopCommand
    origin_time: SimTime
    channel: ChannelId
    direction: Direction


# Wire layout: seq(4) command(1) flags(1) checksum(2). Only the size feeds
# the airtime model; flags/checksum are reserved.
FRAME_WIRE_BYTES = 8


@dataclass(frozen=True)
class ScheduleConfig:
    """Transmission periods. Fast links run at 20 Hz, the slow link at ~9 Hz."""

    fast_period: SimTime = 50 * US_PER_MS
    slow_period: SimTime = 111 * US_PER_MS
    echo_period: SimTime = 50 * US_PER_MS

    def __post_init__(self) -> None:
        if min(self.fast_period, self.slow_period, self.echo_period) <= 0:
            raise ValueError("all schedule periods must be positive")

    def period(self, channel: ChannelId) -> SimTime:
        return self.slow_period if channel is ChannelId.SLOW else self.fast_period


@dataclass(frozen=True)
class WatchdogConfig:
    timeout: SimTime = 300 * US_PER_MS

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("watchdog timeout must be positive")


class TransitionLog:
    """Append-only record of state transitions, exportable as JSON lines."""

    __slots__ = ("records",)

    def __init__(self) -> None:
        self.records: list[tuple[SimTime, str, str, str, str]] = []

    def add(self, time: SimTime, entity: str, old: str, new: str, trigger: str) -> None:
        self.records.append((time, entity, old, new, trigger))

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"time_us": t, "entity": e, "old": o, "new": n, "trigger": g},
                separators=(",", ":"),
            )
            for t, e, o, n, g in self.records
        ]
        return "\n".join(lines) + ("\n" if lines else "")


class Sender:
    """Handheld-side machine: periodic keepalives, immediate change frames,
    and per-link health derived from receiver echoes.

    Sequence numbers increase strictly per emission instant; the frames of
    one burst (one immediate change, or all channels due at the same poll)
    share a single value.
    """

    def __init__(
        self,
        channels: tuple[ChannelId, ...] = ALL_CHANNELS,
        schedule: ScheduleConfig | None = None,
        watchdog: WatchdogConfig | None = None,
        start: SimTime = 0,
        log: TransitionLog | None = None,
    ) -> None:
        if not channels:
            raise ValueError("sender needs at least one enabled channel")
        self.enabled = tuple(channels)
        self.schedule = schedule or ScheduleConfig()
        self.watchdog = watchdog or WatchdogConfig()
        self.command = EStopCommand.HARD_STOP
        self.log = log
        self._next_seq = 0
        self._periods = [self.schedule.period(ch) for ch in self.enabled]
        self._next_emit = [start + p for p in self._periods]
        self._last_echo: dict[ChannelId, SimTime] = {}

    def _emit(self, channels: tuple[ChannelId, ...] | list[ChannelId], now: SimTime) -> list[StatusFrame]:
        seq = self._next_seq
        self._next_seq += 1
        cmd = self.command
        return [StatusFrame(seq, cmd, now, ch, Direction.TO_RECEIVER) for ch in channels]

    def set_command(self, command: EStopCommand, now: SimTime) -> list[StatusFrame]:
        """Apply a command change and transmit it immediately on every channel.

        Each channel's periodic schedule restarts one period after the
        change, so the immediate burst is never followed by a back-to-back
        keepalive.
        """
        if command is not self.command and self.log is not None:
            self.log.add(now, "sender.command", self.command.value, command.value, "set_command")
        self.command = command
        frames = self._emit(self.enabled, now)
        next_emit = self._next_emit
        for i, period in enumerate(self._periods):
            next_emit[i] = now + period
        return frames

    def poll(self, now: SimTime) -> list[StatusFrame]:
        """Emit the periodic keepalive for every channel whose slot is due."""
        next_emit = self._next_emit
        due = []
        for i, ch in enumerate(self.enabled):
            if next_emit[i] <= now:
                due.append(ch)
                next_emit[i] += self._periods[i]
        if not due:
            return []
        return self._emit(due, now)

    def next_emission_time(self) -> SimTime:
        return min(self._next_emit)

    def pending_emissions(self) -> dict[ChannelId, SimTime]:
        return dict(zip(self.enabled, self._next_emit))

    def on_echo(self, frame: StatusFrame, now: SimTime) -> LinkHealth:
        """Record a receiver echo; returns the channel's resulting health."""
        if frame.direction is not Direction.TO_SENDER:
            raise ProtocolError("on_echo expects a receiver-to-sender frame")
        if frame.channel not in BIDIRECTIONAL_CHANNELS:
            raise ProtocolError(f"channel {frame.channel.value} cannot carry echoes")
        if frame.channel not in self.enabled:
            raise ProtocolError(f"echo on disabled channel {frame.channel.value}")
        self._last_echo[frame.channel] = now
        return LinkHealth.ALIVE

    def link_health(self, channel: ChannelId, now: SimTime) -> LinkHealth:
        """Alive iff an echo arrived on `channel` within the watchdog timeout."""
        last = self._last_echo.get(channel)
        if last is not None and now - last <= self.watchdog.timeout:
            return LinkHealth.ALIVE
        return LinkHealth.DEAD


class Receiver:
    """Robot-side machine: freshness latch plus global fail-safe watchdog.

    `latched` is the newest commanded state seen so far (by sequence
    number); `effective` is what the power gate must obey. They differ only
    while the watchdog holds the output at HARD_STOP: any frame arrival,
    fresh or stale, re-arms the watchdog and re-publishes the latch.

    Until the first frame ever arrives both values are HARD_STOP.
    """

    def __init__(
        self,
        schedule: ScheduleConfig | None = None,
        watchdog: WatchdogConfig | None = None,
        log: TransitionLog | None = None,
        on_effective_change: Callable[[EStopCommand, SimTime], None] | None = None,
    ) -> None:
        self.schedule = schedule or ScheduleConfig()
        self.watchdog = watchdog or WatchdogConfig()
        self.log = log
        self.on_effective_change = on_effective_change
        self.latched = EStopCommand.HARD_STOP
        self.effective = EStopCommand.HARD_STOP
        self.last_rx: SimTime | None = None
        self.highest_seq: int | None = None
        self.frames_fresh = 0
        self.frames_stale = 0
        self._next_echo_a: SimTime = 0
        self._next_echo_b: SimTime = 0
        self._echo_seq = 0

    def _set_effective(self, command: EStopCommand, now: SimTime, trigger: str) -> None:
        if command is self.effective:
            return
        old = self.effective
        self.effective = command
        if self.log is not None:
            self.log.add(now, "receiver.effective", old.value, command.value, trigger)
        if self.on_effective_change is not None:
            self.on_effective_change(command, now)

    def on_frame(self, frame: StatusFrame, now: SimTime) -> StatusFrame | None:
        """Ingest a delivered frame; returns an echo frame when one is due.

        Stale frames (seq at or below the highest seen) still feed the
        watchdog but never change the latch. Echoes are emitted only for
        bidirectional channels and at most once per echo period per channel.
        """
        if frame.direction is not Direction.TO_RECEIVER:
            raise ProtocolError("on_frame expects a sender-to-receiver frame")
        self.last_rx = now
        if self.highest_seq is None or frame.seq > self.highest_seq:
            self.highest_seq = frame.seq
            if frame.command is not self.latched:
                if self.log is not None:
                    self.log.add(
                        now, "receiver.latched", self.latched.value, frame.command.value, "frame"
                    )
                self.latched = frame.command
            self.frames_fresh += 1
        else:
            self.frames_stale += 1
        self._set_effective(self.latched, now, "frame")
        channel = frame.channel
        if channel is ChannelId.FAST_A:
            if now < self._next_echo_a:
                return None
            self._next_echo_a = now + self.schedule.echo_period
        elif channel is ChannelId.FAST_B:
            if now < self._next_echo_b:
                return None
            self._next_echo_b = now + self.schedule.echo_period
        else:
            return None
        echo = StatusFrame(self._echo_seq, self.effective, now, channel, Direction.TO_SENDER)
        self._echo_seq += 1
        return echo

    def watchdog_deadline(self) -> SimTime | None:
        """Instant at which silence becomes a fail-safe trip; None before any frame."""
        if self.last_rx is None:
            return None
        return self.last_rx + self.watchdog.timeout

    def watchdog_expired(self, now: SimTime) -> bool:
        return self.last_rx is None or now - self.last_rx >= self.watchdog.timeout

    def watchdog_fire(self, now: SimTime) -> EStopCommand:
        """Force the fail-safe. Caller must only invoke this once the timeout
        has genuinely elapsed; firing early is a programming error."""
        if not self.watchdog_expired(now):
            raise ProtocolError(
                f"watchdog fired at t={now} us but a frame arrived at {self.last_rx} us"
            )
        self._set_effective(EStopCommand.HARD_STOP, now, "watchdog")
        return self.effective

    def watchdog_check(self, now: SimTime) -> SimTime | None:
        """Timer callback: trip if the timeout elapsed, else hand back the
        deadline the timer should be re-armed to."""
        if not self.watchdog_expired(now):
            return self.last_rx + self.watchdog.timeout  # type: ignore[operator]
        self.watchdog_fire(now)
        return None
