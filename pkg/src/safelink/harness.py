"""Scenario runner: wires sender -> radio links -> receiver -> power gate on
one deterministic engine and reproduces the 1000-toggle latency benchmark.

Per toggle the controller commands a hard stop, waits for the observed
power-off plus a randomized dwell, commands run at t0 and records the
power-restore instant t1; the release latency sample is t1 - t0. Dwells
are drawn uniformly between the configured bounds so toggle phase never
locks onto the transmission schedule. The activation direction
(command-to-power-cut) is recorded as a secondary series.

Reports are exact functions of (scenario, config, seed): exports carry
simulated time and event counts, never wall-clock values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from io import StringIO
from math import sqrt
from pathlib import Path

from .channels import ChannelSpec, ScenarioSpec, transmit
from .gate import EStopGate, GateConfig, default_gate_config
from .protocol import (
    BIDIRECTIONAL_CHANNELS,
    ChannelId,
    Direction,
    EStopCommand,
    Receiver,
    ScheduleConfig,
    Sender,
    StatusFrame,
    TransitionLog,
    WatchdogConfig,
)
from .sim import Engine, EventHandle, SimTime, US_PER_MS, US_PER_SEC

REPORT_SCHEMA = "safelink-report@1"
CSV_COLUMNS = "scenario,mean_ms,std_ms,max_ms,min_ms,count,seed"
DEFAULT_SEED = 42


class Measure(Enum):
    RELEASE = "release"
    ACTIVATE = "activate"
    BOTH = "both"


class ExperimentAborted(Exception):
    """A commanded release (or stop) failed to complete within the limit."""


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec
    toggles: int = 1000
    seed: int = DEFAULT_SEED
    dwell_min_us: SimTime = 500_000
    dwell_max_us: SimTime = 1_000_000
    measure: Measure = Measure.BOTH
    abort_after_us: SimTime = 10 * US_PER_SEC
    keep_samples: bool = False
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    watchdog: WatchdogConfig = field(default_factory=WatchdogConfig)
    gate_config: GateConfig | None = None

    def __post_init__(self) -> None:
        if self.toggles <= 0:
            raise ValueError("toggles must be positive")
        if not 0 < self.dwell_min_us <= self.dwell_max_us:
            raise ValueError("need 0 < dwell_min <= dwell_max")
        if self.dwell_min_us <= self.watchdog.timeout:
            raise ValueError("dwell_min must exceed the watchdog timeout")


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    max_ms: float
    min_ms: float
    count: int
    samples_us: list[int] | None = None

    @classmethod
    def from_samples_us(cls, samples: list[int], keep: bool = False) -> "LatencyStats":
        if not samples:
            raise ValueError("no samples")
        n = len(samples)
        mean = sum(samples) / n
        var = sum((s - mean) ** 2 for s in samples) / n  # population variance
        return cls(
            mean_ms=mean / US_PER_MS,
            std_ms=sqrt(var) / US_PER_MS,
            max_ms=max(samples) / US_PER_MS,
            min_ms=min(samples) / US_PER_MS,
            count=n,
            samples_us=list(samples) if keep else None,
        )

    def to_dict(self) -> dict:
        doc = {
            "mean_ms": round(self.mean_ms, 6),
            "std_ms": round(self.std_ms, 6),
            "max_ms": round(self.max_ms, 6),
            "min_ms": round(self.min_ms, 6),
            "count": self.count,
        }
        if self.samples_us is not None:
            doc["samples_us"] = self.samples_us
        return doc


@dataclass
class ChannelCounters:
    sent: int = 0
    delivered: int = 0
    lost: int = 0
    suppressed: int = 0

    def to_dict(self) -> dict:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "lost": self.lost,
            "suppressed": self.suppressed,
        }


@dataclass
class ExperimentReport:
    scenario: str
    seed: int
    toggles: int
    dwell_min_us: int
    dwell_max_us: int
    measure: str
    release: LatencyStats | None
    activate: LatencyStats | None
    channels: dict[str, dict]
    watchdog_trips: int
    spurious_power_events: int
    events_processed: int
    sim_time_us: int

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario,
            "seed": self.seed,
            "toggles": self.toggles,
            "dwell_min_us": self.dwell_min_us,
            "dwell_max_us": self.dwell_max_us,
            "measure": self.measure,
            "release": self.release.to_dict() if self.release else None,
            "activate": self.activate.to_dict() if self.activate else None,
            "channels": self.channels,
            "watchdog_trips": self.watchdog_trips,
            "spurious_power_events": self.spurious_power_events,
            "events_processed": self.events_processed,
            "sim_time_us": self.sim_time_us,
        }

    def primary_stats(self) -> LatencyStats:
        stats = self.release if self.release is not None else self.activate
        assert stats is not None
        return stats


def _compile_draw(spec: ChannelSpec, rng):
    """Specialized equivalent of channels.transmit with all constants bound
    locally; kept draw-for-draw identical to the reference implementation
    (see test_channels for the equivalence check)."""
    from math import cos, exp, log, pi, sqrt

    u64 = rng.next_u64
    inv53 = 1.0 / (1 << 53)
    two_pi = 2.0 * pi
    loss = spec.loss_probability
    sigma = spec.jitter_sigma
    scale = spec.jitter_scale_us
    fixed = spec.airtime_us + spec.base_latency_us

    def draw(now: SimTime) -> SimTime | None:
        lost = (u64() >> 11) * inv53 < loss
        u1 = ((u64() >> 11) + 1) * inv53
        u2 = (u64() >> 11) * inv53
        if lost:
            return None
        if scale > 0:
            z = sqrt(-2.0 * log(u1)) * cos(two_pi * u2)
            return now + fixed + int(round(scale * exp(sigma * z)))
        return now + fixed

    return draw


class _Link:
    """One radio channel bound to the engine: draws loss/latency per frame
    and schedules the delivery. Both directions share the channel spec."""

    __slots__ = ("spec", "engine", "deliver_fwd", "deliver_rev", "fwd", "rev", "silenced", "_draw")

    def __init__(self, spec: ChannelSpec, engine: Engine, deliver_fwd, deliver_rev) -> None:
        self.spec = spec
        self.engine = engine
        self.deliver_fwd = deliver_fwd
        self.deliver_rev = deliver_rev
        self.fwd = ChannelCounters()
        self.rev = ChannelCounters()
        self.silenced = False
        self._draw = _compile_draw(spec, engine.rng)

    def send(self, frame: StatusFrame, now: SimTime) -> None:
        counters = self.fwd if frame.direction is Direction.TO_RECEIVER else self.rev
        counters.sent += 1
        if self.silenced:
            counters.suppressed += 1
            return
        at = self._draw(now)
        if at is None:
            counters.lost += 1
            return
        counters.delivered += 1
        deliver = (
            self.deliver_fwd if frame.direction is Direction.TO_RECEIVER else self.deliver_rev
        )
        self.engine.schedule(at, lambda t, f=frame, d=deliver: d(f, t))


class Rig:
    """Sender, links, receiver, watchdog timer and power gate on one engine."""

    def __init__(
        self,
        scenario: ScenarioSpec,
        seed: int,
        schedule: ScheduleConfig | None = None,
        watchdog: WatchdogConfig | None = None,
        gate_config: GateConfig | None = None,
        log: TransitionLog | None = None,
        with_gate: bool = True,
    ) -> None:
        self.scenario = scenario
        self.engine = Engine(seed)
        self.log = log
        self.schedule = schedule or ScheduleConfig()
        self.watchdog = watchdog or WatchdogConfig()
        enabled = scenario.enabled_channels()
        self.sender = Sender(
            channels=enabled, schedule=self.schedule, watchdog=self.watchdog, log=log
        )
        self.receiver = Receiver(
            schedule=self.schedule,
            watchdog=self.watchdog,
            log=log,
            on_effective_change=self._on_effective_change,
        )
        self.gate: EStopGate | None = None
        if with_gate:
            self.gate = EStopGate(
                config=gate_config or default_gate_config(),
                engine=self.engine,
                log=log,
                on_power_change=self._on_power_change,
            )
        self.links: dict[ChannelId, _Link] = {
            ch: _Link(scenario.spec(ch), self.engine, self._deliver_to_receiver, self._deliver_to_sender)
            for ch in enabled
        }
        self.delivery_times: list[SimTime] | None = None
        self.watchdog_trips = 0
        self.power_listener = None  # set by controllers: fn(on: bool, now)
        self._wd_handle: EventHandle | None = None
        self._poll_handle = self.engine.schedule(self.sender.next_emission_time(), self._on_poll)

    # -- sender side ---------------------------------------------------------

    def set_command(self, command: EStopCommand, now: SimTime) -> None:
        frames = self.sender.set_command(command, now)
        for frame in frames:
            self.links[frame.channel].send(frame, now)
        self._reschedule_poll()

    def _on_poll(self, now: SimTime) -> None:
        self._poll_handle = None
        for frame in self.sender.poll(now):
            self.links[frame.channel].send(frame, now)
        self._reschedule_poll()

    def _reschedule_poll(self) -> None:
        if self._poll_handle is not None:
            self.engine.cancel(self._poll_handle)
        self._poll_handle = self.engine.schedule(self.sender.next_emission_time(), self._on_poll)

    # -- receiver side ---------------------------------------------------------

    def _deliver_to_receiver(self, frame: StatusFrame, now: SimTime) -> None:
        if self.delivery_times is not None:
            self.delivery_times.append(now)
        echo = self.receiver.on_frame(frame, now)
        if self._wd_handle is None or not self._wd_handle.pending:
            deadline = self.receiver.watchdog_deadline()
            if deadline is not None:
                self._wd_handle = self.engine.schedule(deadline, self._on_watchdog)
        if echo is not None:
            self.links[echo.channel].send(echo, now)

    def _deliver_to_sender(self, frame: StatusFrame, now: SimTime) -> None:
        self.sender.on_echo(frame, now)

    def _on_watchdog(self, now: SimTime) -> None:
        self._wd_handle = None
        tripped_before = self.receiver.effective
        deadline = self.receiver.watchdog_check(now)
        if deadline is not None:
            self._wd_handle = self.engine.schedule(deadline, self._on_watchdog)
        elif tripped_before is not EStopCommand.HARD_STOP:
            self.watchdog_trips += 1

    # -- gate side ---------------------------------------------------------

    def _on_effective_change(self, command: EStopCommand, now: SimTime) -> None:
        if self.gate is not None:
            self.gate.apply(command, now)

    def _on_power_change(self, on: bool, now: SimTime) -> None:
        if self.power_listener is not None:
            self.power_listener(on, now)

    # -- controls used by experiments ---------------------------------------

    def silence_all(self, silenced: bool) -> None:
        for link in self.links.values():
            link.silenced = silenced

    def channel_counters(self) -> dict[str, dict]:
        doc: dict[str, dict] = {}
        for ch, link in sorted(self.links.items(), key=lambda kv: kv[0].value):
            doc[ch.value] = {"to_receiver": link.fwd.to_dict(), "to_sender": link.rev.to_dict()}
        return doc


class _TogglePhase(Enum):
    WARMUP = "warmup"
    RUN_DWELL = "run_dwell"
    AWAIT_OFF = "await_off"
    OFF_DWELL = "off_dwell"
    AWAIT_ON = "await_on"


class _ToggleController:
    """Drives the stop/release cycle and collects latency samples."""

    def __init__(self, rig: Rig, config: ExperimentConfig) -> None:
        self.rig = rig
        self.config = config
        self.engine = rig.engine
        self.phase = _TogglePhase.WARMUP
        self.release_samples: list[int] = []
        self.activate_samples: list[int] = []
        self.spurious = 0
        self.finished = False
        self.t_stop: SimTime = 0
        self.t_run: SimTime = 0
        self._abort_handle: EventHandle | None = None
        rig.power_listener = self._on_power
        rig.set_command(EStopCommand.RUN, 0)
        self._arm_abort(0, "initial release")

    def _dwell(self) -> SimTime:
        return self.engine.rng.uniform_int(self.config.dwell_min_us, self.config.dwell_max_us)

    def _arm_abort(self, issued: SimTime, what: str) -> None:
        self._disarm_abort()

        def check(now: SimTime, what=what, issued=issued) -> None:
            raise ExperimentAborted(
                f"{what} issued at t={issued} us did not complete within "
                f"{self.config.abort_after_us} us (scenario {self.rig.scenario.name!r}); "
                "only a fully lossy channel set can cause this"
            )

        self._abort_handle = self.engine.schedule(issued + self.config.abort_after_us, check)

    def _disarm_abort(self) -> None:
        if self._abort_handle is not None:
            self.engine.cancel(self._abort_handle)
            self._abort_handle = None

    def _on_power(self, on: bool, now: SimTime) -> None:
        if on and self.phase in (_TogglePhase.WARMUP, _TogglePhase.AWAIT_ON):
            if self.phase is _TogglePhase.AWAIT_ON:
                self.release_samples.append(now - self.t_run)
            self._disarm_abort()
            if len(self.release_samples) >= self.config.toggles:
                self.finished = True
                return
            self.phase = _TogglePhase.RUN_DWELL
            self.engine.schedule(now + self._dwell(), self._do_stop)
        elif not on and self.phase is _TogglePhase.AWAIT_OFF:
            self.activate_samples.append(now - self.t_stop)
            self._disarm_abort()
            self.phase = _TogglePhase.OFF_DWELL
            self.engine.schedule(now + self._dwell(), self._do_run)
        else:
            self.spurious += 1

    def _do_stop(self, now: SimTime) -> None:
        self.phase = _TogglePhase.AWAIT_OFF
        self.t_stop = now
        self.rig.set_command(EStopCommand.HARD_STOP, now)
        if self.rig.gate is not None and not self.rig.gate.power_observed:
            # power already vanished (e.g. a fail-safe trip just before the
            # commanded stop): count the sample as immediate
            self.activate_samples.append(0)
            self.phase = _TogglePhase.OFF_DWELL
            self.engine.schedule(now + self._dwell(), self._do_run)
            return
        self._arm_abort(now, "commanded stop")

    def _do_run(self, now: SimTime) -> None:
        self.phase = _TogglePhase.AWAIT_ON
        self.t_run = now
        self.rig.set_command(EStopCommand.RUN, now)
        self._arm_abort(now, "commanded release")


def run_toggle_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Toggle the E-Stop `config.toggles` times and collect latency statistics."""
    rig = Rig(
        config.scenario,
        config.seed,
        schedule=config.schedule,
        watchdog=config.watchdog,
        gate_config=config.gate_config,
    )
    controller = _ToggleController(rig, config)
    engine = rig.engine
    step = engine.step
    while not controller.finished:
        if not step():
            raise ExperimentAborted("event queue drained before the experiment finished")
    release = LatencyStats.from_samples_us(controller.release_samples, config.keep_samples)
    activate = (
        LatencyStats.from_samples_us(controller.activate_samples, config.keep_samples)
        if controller.activate_samples
        else None
    )
    measure = config.measure
    return ExperimentReport(
        scenario=config.scenario.name,
        seed=config.seed,
        toggles=config.toggles,
        dwell_min_us=config.dwell_min_us,
        dwell_max_us=config.dwell_max_us,
        measure=measure.value,
        release=release if measure in (Measure.RELEASE, Measure.BOTH) else None,
        activate=activate if measure in (Measure.ACTIVATE, Measure.BOTH) else None,
        channels=rig.channel_counters(),
        watchdog_trips=rig.watchdog_trips,
        spurious_power_events=controller.spurious,
        events_processed=engine.events_processed,
        sim_time_us=engine.now,
    )


@dataclass
class ProbeConfig:
    scenario: ScenarioSpec
    probes: int = 1000
    seed: int = DEFAULT_SEED
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    watchdog: WatchdogConfig = field(default_factory=WatchdogConfig)
    gate_config: GateConfig | None = None

    def __post_init__(self) -> None:
        if self.probes <= 0:
            raise ValueError("probes must be positive")


@dataclass
class ProbeReport:
    scenario: str
    seed: int
    probes: int
    trip_stats: LatencyStats
    events_processed: int
    sim_time_us: int

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "watchdog_probe",
            "scenario": self.scenario,
            "seed": self.seed,
            "probes": self.probes,
            "trip": self.trip_stats.to_dict(),
            "events_processed": self.events_processed,
            "sim_time_us": self.sim_time_us,
        }


class _ProbeController:
    """Silences all channels at random phases; measures last-delivery to
    observed power-off."""

    def __init__(self, rig: Rig, config: ProbeConfig) -> None:
        self.rig = rig
        self.config = config
        self.engine = rig.engine
        self.samples: list[int] = []
        self.awaiting_off = False
        self.finished = False
        rig.power_listener = self._on_power
        rig.set_command(EStopCommand.RUN, 0)

    def _on_power(self, on: bool, now: SimTime) -> None:
        if on:
            if not self.finished:
                delay = self.engine.rng.uniform_int(100_000, 1_000_000)
                self.engine.schedule(now + delay, self._begin_silence)
        elif self.awaiting_off:
            self.awaiting_off = False
            last_rx = self.rig.receiver.last_rx
            assert last_rx is not None
            self.samples.append(now - last_rx)
            if len(self.samples) >= self.config.probes:
                self.finished = True
            self.rig.silence_all(False)

    def _begin_silence(self, now: SimTime) -> None:
        gate = self.rig.gate
        if self.awaiting_off or gate is None or not gate.power_observed:
            # already probing, or a loss streak tripped the fail-safe on its
            # own: skip this injection, the recovery power-on schedules a new one
            return
        self.rig.silence_all(True)
        self.awaiting_off = True


def run_watchdog_probe(config: ProbeConfig) -> ProbeReport:
    """Measure the fail-safe: time from the last delivered frame to the
    observed power-off, across `config.probes` random silence injections."""
    rig = Rig(
        config.scenario,
        config.seed,
        schedule=config.schedule,
        watchdog=config.watchdog,
        gate_config=config.gate_config,
    )
    controller = _ProbeController(rig, config)
    engine = rig.engine
    step = engine.step
    while not controller.finished:
        if not step():
            raise ExperimentAborted("event queue drained during watchdog probe")
    return ProbeReport(
        scenario=config.scenario.name,
        seed=config.seed,
        probes=config.probes,
        trip_stats=LatencyStats.from_samples_us(controller.samples, keep=False),
        events_processed=engine.events_processed,
        sim_time_us=engine.now,
    )


# -- export ----------------------------------------------------------------


def export_report(report: ExperimentReport | ProbeReport, format: str = "json") -> str:
    """Serialize a report deterministically; same report -> same bytes."""
    if format == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    if format == "csv":
        return export_reports_csv([report])
    raise ValueError(f"unknown export format {format!r}")


def export_reports_csv(reports: list) -> str:
    """One CSV row per report, keyed and sorted by scenario name."""
    out = StringIO()
    out.write(CSV_COLUMNS + "\n")
    for report in sorted(reports, key=lambda r: r.scenario):
        stats = report.primary_stats() if isinstance(report, ExperimentReport) else report.trip_stats
        out.write(
            f"{report.scenario},{stats.mean_ms:.1f},{stats.std_ms:.1f},"
            f"{stats.max_ms:.1f},{stats.min_ms:.1f},{stats.count},{report.seed}\n"
        )
    return out.getvalue()


def write_report(report, path: str | Path, format: str = "json") -> None:
    Path(path).write_text(export_report(report, format))
