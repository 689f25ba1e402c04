"""E-Stop power board: enable chain, high-side switches, inrush limiting.

The microcontroller enable pin is the power latch: a hard stop drives it
LOW, run drives it HIGH, a soft stop leaves it untouched (power retained,
motion inhibited). The pin is wired in series with the hardware buttons,
so a branch conducts only while the pin is HIGH, every button is closed
and the branch has no latched overcurrent fault.

Each branch drives an RC load (input capacitance in parallel with a
steady-state resistance) through a small series source resistance and, on
the flipper and manipulator branches, an inrush limiter whose resistance
decays from R_cold to R_hot while the branch conducts. The switch current
is compared against an overcurrent threshold; exceeding it continuously
for the deglitch time latches a fault that persists until explicitly
reset.

The externally observable "power" signal is the drive-branch output
voltage crossing 90% of the bus, mirroring a voltage-divider tap on the
power output: it goes high only once the output has actually risen, and
goes low only once the load capacitance has discharged below the
threshold.

Integration uses exact exponential updates of each branch's linear RC
circuit (limiter resistance held constant within a step). Steps run on a
100 us grid while anything fast is happening (recent switching, pending
overcurrent, pending power-detect crossing) and then grow geometrically,
capped at `max_step_us`, while only the slow limiter decay remains. A
branch whose output has converged to its asymptote is snapped onto the
exact steady state and not stepped again, so idle stretches cost nothing
and repeated switch-on transients are bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable

from .protocol import EStopCommand, TransitionLog
from .sim import Engine, EventHandle, SimTime

GATE_CONFIG_SCHEMA = "safelink-gate-config@1"


class Branch(Enum):
    DRIVE = "drive"
    FLIPPERS = "flippers"
    MANIPULATOR = "manipulator"


@dataclass(frozen=True)
class LimiterConfig:
    r_cold_ohm: float = 5.0
    r_hot_ohm: float = 0.05
    tau_us: int = 100_000

    def __post_init__(self) -> None:
        if not 0.0 < self.r_hot_ohm <= self.r_cold_ohm:
            raise ValueError("limiter needs 0 < r_hot <= r_cold")
        if self.tau_us <= 0:
            raise ValueError("limiter tau must be positive")


@dataclass(frozen=True)
class BranchConfig:
    capacitance_f: float
    load_resistance_ohm: float
    series_resistance_ohm: float
    limiter: LimiterConfig | None = None

    def __post_init__(self) -> None:
        if self.capacitance_f <= 0.0 or self.load_resistance_ohm <= 0.0:
            raise ValueError("capacitance and load resistance must be positive")
        if self.series_resistance_ohm <= 0.0:
            raise ValueError("series resistance must be positive (zero makes the RC degenerate)")


@dataclass(frozen=True)
class GateConfig:
    bus_voltage_v: float = 24.0
    trip_threshold_a: float = 20.0
    trip_time_us: int = 1_000
    fine_step_us: int = 100
    max_step_us: int = 50_000
    fine_window_us: int = 500
    detect_fraction: float = 0.9
    hw_button_count: int = 2
    branches: dict[Branch, BranchConfig] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 < self.detect_fraction < 1.0:
            raise ValueError("detect_fraction must lie in (0, 1)")
        if self.fine_step_us <= 0 or self.max_step_us < self.fine_step_us:
            raise ValueError("need 0 < fine_step <= max_step")


def default_gate_config() -> GateConfig:
    data = resources.files("safelink").joinpath("data/gate_defaults.json")
    return gate_config_from_dict(json.loads(data.read_text()))


def gate_config_from_dict(doc: dict) -> GateConfig:
    if doc.get("schema", GATE_CONFIG_SCHEMA) != GATE_CONFIG_SCHEMA:
        raise ValueError(f"unsupported gate config schema {doc.get('schema')!r}")
    branches: dict[Branch, BranchConfig] = {}
    for name, entry in doc["branches"].items():
        lim = entry.get("limiter")
        branches[Branch(name)] = BranchConfig(
            capacitance_f=float(entry["capacitance_f"]),
            load_resistance_ohm=float(entry["load_resistance_ohm"]),
            series_resistance_ohm=float(entry["series_resistance_ohm"]),
            limiter=None
            if lim is None
            else LimiterConfig(
                r_cold_ohm=float(lim["r_cold_ohm"]),
                r_hot_ohm=float(lim["r_hot_ohm"]),
                tau_us=int(lim["tau_us"]),
            ),
        )
    return GateConfig(
        bus_voltage_v=float(doc["bus_voltage_v"]),
        trip_threshold_a=float(doc["trip_threshold_a"]),
        trip_time_us=int(doc["trip_time_us"]),
        fine_step_us=int(doc.get("fine_step_us", 100)),
        max_step_us=int(doc.get("max_step_us", 50_000)),
        fine_window_us=int(doc.get("fine_window_us", 500)),
        detect_fraction=float(doc.get("detect_fraction", 0.9)),
        hw_button_count=int(doc.get("hw_button_count", 2)),
        branches=branches,
    )


def gate_config_to_dict(config: GateConfig) -> dict:
    return {
        "schema": GATE_CONFIG_SCHEMA,
        "bus_voltage_v": config.bus_voltage_v,
        "trip_threshold_a": config.trip_threshold_a,
        "trip_time_us": config.trip_time_us,
        "fine_step_us": config.fine_step_us,
        "max_step_us": config.max_step_us,
        "fine_window_us": config.fine_window_us,
        "detect_fraction": config.detect_fraction,
        "hw_button_count": config.hw_button_count,
        "branches": {
            br.value: {
                "capacitance_f": cfg.capacitance_f,
                "load_resistance_ohm": cfg.load_resistance_ohm,
                "series_resistance_ohm": cfg.series_resistance_ohm,
                "limiter": None
                if cfg.limiter is None
                else {
                    "r_cold_ohm": cfg.limiter.r_cold_ohm,
                    "r_hot_ohm": cfg.limiter.r_hot_ohm,
                    "tau_us": cfg.limiter.tau_us,
                },
            }
            for br, cfg in config.branches.items()
        },
    }


# Convergence bands, as fractions of the bus voltage: an off branch below
# _SETTLE_FRACTION is clamped to zero; a conducting branch within
# _SETTLE_FRACTION of its fully-settled asymptote is snapped onto it.
_SETTLE_FRACTION = 0.01


class BranchState:
    """Electrical state of one switched branch."""

    __slots__ = (
        "branch",
        "config",
        "conducting",
        "latched_fault",
        "limiter_r",
        "v_out",
        "current_a",
        "last_change",
        "over_since",
        "quiescent",
        "v_steady",
        "i_steady",
        "r_hot_total",
    )

    def __init__(self, branch: Branch, config: BranchConfig, bus_voltage_v: float) -> None:
        self.branch = branch
        self.config = config
        self.conducting = False
        self.latched_fault = False
        self.limiter_r = config.limiter.r_cold_ohm if config.limiter else 0.0
        self.v_out = 0.0
        self.current_a = 0.0
        self.last_change: SimTime = 0
        self.over_since: SimTime | None = None
        self.quiescent = True
        # Asymptotic operating point with the limiter fully hot.
        self.r_hot_total = config.series_resistance_ohm + (
            config.limiter.r_hot_ohm if config.limiter else 0.0
        )
        r_load = config.load_resistance_ohm
        self.v_steady = bus_voltage_v * r_load / (r_load + self.r_hot_total)
        self.i_steady = bus_voltage_v / (r_load + self.r_hot_total)

    def series_resistance(self) -> float:
        return self.config.series_resistance_ohm + self.limiter_r


@dataclass
class SwitchSnapshot:
    branch: Branch
    conducting: bool
    latched_fault: bool
    reported_current_a: float
    output_voltage_v: float
    limiter_resistance_ohm: float


@dataclass
class GateState:
    """Externally visible gate state at one instant."""

    mcu_enable_pin: bool
    hw_buttons_closed: tuple[bool, ...]
    motion_inhibit: bool
    power_observed: bool
    switches: dict[Branch, SwitchSnapshot]


class EStopGate:
    """The E-Stop board. Drive it either from a sim `Engine` (it schedules
    its own integration steps while any branch is in transient) or manually
    via `step(dt)` with engine=None."""

    def __init__(
        self,
        config: GateConfig | None = None,
        engine: Engine | None = None,
        log: TransitionLog | None = None,
        on_power_change: Callable[[bool, SimTime], None] | None = None,
        trace: list[tuple[int, str, float, float]] | None = None,
    ) -> None:
        self.config = config or default_gate_config()
        if not self.config.branches:
            raise ValueError("gate config defines no branches")
        self.engine = engine
        self.log = log
        self.on_power_change = on_power_change
        self.trace = trace
        self.now: SimTime = engine.now if engine is not None else 0
        self.enable_pin = False
        self.motion_inhibit = True
        self.last_command = EStopCommand.HARD_STOP
        self.buttons_closed = [True] * self.config.hw_button_count
        self.branches: dict[Branch, BranchState] = {
            br: BranchState(br, cfg, self.config.bus_voltage_v)
            for br, cfg in self.config.branches.items()
        }
        self._branch_list = list(self.branches.values())
        self._drive = self.branches.get(Branch.DRIVE)
        self.power_observed = False
        self._detect_v = self.config.detect_fraction * self.config.bus_voltage_v
        self._settle_v = _SETTLE_FRACTION * self.config.bus_voltage_v
        self._step_handle: EventHandle | None = None
        self._step_us = self.config.fine_step_us

    # -- public operations -------------------------------------------------

    def apply(self, command: EStopCommand, now: SimTime) -> GateState:
        """React to the effective E-Stop command."""
        self._advance_to(now)
        self.last_command = command
        if command is EStopCommand.HARD_STOP:
            self._set_pin(False, now)
            self.motion_inhibit = True
        elif command is EStopCommand.RUN:
            self._set_pin(True, now)
            self.motion_inhibit = False
        else:  # SOFT_STOP: pin (and therefore power) untouched
            self.motion_inhibit = True
        self._recompute_conduction(now)
        self._reschedule()
        return self.snapshot()

    def set_button(self, index: int, closed: bool, now: SimTime) -> GateState:
        """Open or close one hardware button in the series enable chain."""
        self._advance_to(now)
        self.buttons_closed[index] = closed
        self._recompute_conduction(now)
        self._reschedule()
        return self.snapshot()

    def reset_fault(self, branch: Branch, now: SimTime) -> SwitchSnapshot:
        """Clear a latched overcurrent fault; conduction resumes only if the
        enable conditions currently hold. No-op on a healthy branch."""
        self._advance_to(now)
        state = self.branches[branch]
        if state.latched_fault:
            state.latched_fault = False
            if self.log is not None:
                self.log.add(now, f"gate.{branch.value}.fault", "latched", "clear", "reset_fault")
        self._recompute_conduction(now)
        self._reschedule()
        return self._snapshot_switch(state)

    def step(self, dt: SimTime) -> dict[Branch, float]:
        """Advance the electrical model by `dt` (manual driving mode) and
        report per-branch switch currents."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        self._advance_to(self.now + dt)
        return {br: st.current_a for br, st in self.branches.items()}

    def snapshot(self) -> GateState:
        return GateState(
            mcu_enable_pin=self.enable_pin,
            hw_buttons_closed=tuple(self.buttons_closed),
            motion_inhibit=self.motion_inhibit,
            power_observed=self.power_observed,
            switches={br: self._snapshot_switch(st) for br, st in self.branches.items()},
        )

    def conduction_permitted(self) -> bool:
        return self.enable_pin and all(self.buttons_closed)

    # -- internals ----------------------------------------------------------

    def _snapshot_switch(self, state: BranchState) -> SwitchSnapshot:
        return SwitchSnapshot(
            branch=state.branch,
            conducting=state.conducting,
            latched_fault=state.latched_fault,
            reported_current_a=state.current_a,
            output_voltage_v=state.v_out,
            limiter_resistance_ohm=state.limiter_r,
        )

    def _set_pin(self, high: bool, now: SimTime) -> None:
        if high != self.enable_pin and self.log is not None:
            self.log.add(now, "gate.enable_pin", str(self.enable_pin), str(high), "command")
        self.enable_pin = high

    def _recompute_conduction(self, now: SimTime) -> None:
        permitted = self.conduction_permitted()
        for state in self.branches.values():
            should = permitted and not state.latched_fault
            if should == state.conducting:
                continue
            state.conducting = should
            state.last_change = now
            state.over_since = None
            state.quiescent = False
            if state.config.limiter is not None and should:
                # NTC treated as fully re-armed after any off period.
                state.limiter_r = state.config.limiter.r_cold_ohm
            if not should:
                state.current_a = 0.0
            if self.log is not None:
                self.log.add(
                    now,
                    f"gate.{state.branch.value}.conducting",
                    str(not should),
                    str(should),
                    "gate",
                )
        self._update_power_observed(now)

    def _advance_to(self, now: SimTime) -> None:
        dt = now - self.now
        if dt < 0:
            raise ValueError(f"gate time cannot move backwards ({self.now} -> {now})")
        if dt == 0:
            return
        if any(not st.quiescent for st in self.branches.values()):
            self._integrate(dt, now)
        self.now = now

    def _integrate(self, dt: SimTime, now: SimTime) -> None:
        bus = self.config.bus_voltage_v
        trip_a = self.config.trip_threshold_a
        trip_us = self.config.trip_time_us
        settle_v = self._settle_v
        exp = math.exp
        for state in self._branch_list:
            if state.quiescent:
                continue
            cfg = state.config
            if state.conducting:
                r_ser = cfg.series_resistance_ohm + state.limiter_r
                r_load = cfg.load_resistance_ohm
                v_target = bus * r_load / (r_load + r_ser)
                tau = (r_ser * r_load / (r_ser + r_load)) * cfg.capacitance_f * 1e6  # us
                state.v_out = v_target + (state.v_out - v_target) * exp(-dt / tau)
                state.current_a = (bus - state.v_out) / r_ser
                lim = cfg.limiter
                if lim is not None:
                    state.limiter_r = lim.r_hot_ohm + (state.limiter_r - lim.r_hot_ohm) * exp(
                        -dt / lim.tau_us
                    )
                # Overcurrent deglitch: the threshold must be exceeded
                # continuously for trip_time before the fault latches.
                if state.current_a >= trip_a:
                    if state.over_since is None:
                        state.over_since = now
                    elif now - state.over_since >= trip_us:
                        self._trip(state, now)
                        continue
                else:
                    state.over_since = None
                    # Snap onto the asymptote once the output has converged;
                    # every settled switch-on then ends in the same exact state.
                    if abs(state.v_out - state.v_steady) <= settle_v:
                        state.v_out = state.v_steady
                        state.current_a = state.i_steady
                        if lim is not None:
                            state.limiter_r = lim.r_hot_ohm
                        state.quiescent = True
            else:
                tau = cfg.load_resistance_ohm * cfg.capacitance_f * 1e6
                state.v_out *= exp(-dt / tau)
                state.current_a = 0.0
                if state.v_out <= settle_v:
                    state.v_out = 0.0
                    state.quiescent = True
            if self.trace is not None:
                self.trace.append((now, state.branch.value, state.current_a, state.v_out))
        self._update_power_observed(now)

    def _trip(self, state: BranchState, now: SimTime) -> None:
        state.latched_fault = True
        state.conducting = False
        state.current_a = 0.0
        state.over_since = None
        state.last_change = now
        state.quiescent = False
        if self.log is not None:
            self.log.add(now, f"gate.{state.branch.value}.fault", "clear", "latched", "overcurrent")

    def _update_power_observed(self, now: SimTime) -> None:
        drive = self.branches.get(Branch.DRIVE)
        if drive is None:
            return
        observed = drive.v_out >= self._detect_v
        if observed != self.power_observed:
            self.power_observed = observed
            if self.log is not None:
                self.log.add(
                    now, "gate.power_observed", str(not observed), str(observed), "voltage"
                )
            if self.on_power_change is not None:
                self.on_power_change(observed, now)

    def _in_transient(self) -> bool:
        for st in self._branch_list:
            if not st.quiescent:
                return True
        return False

    def _detect_pending(self) -> bool:
        drive = self._drive
        if drive is None or drive.quiescent:
            return False
        if drive.conducting:
            return not self.power_observed
        return self.power_observed

    def _next_step(self) -> SimTime:
        """Fine steps while a crossing may be imminent, geometric growth
        (capped) through the slow limiter decay afterwards."""
        fine = self.config.fine_step_us
        if self._detect_pending():
            self._step_us = fine
            return fine
        window = self.config.fine_window_us
        now = self.now
        for state in self._branch_list:
            if state.quiescent:
                continue
            if state.over_since is not None or now - state.last_change < window:
                self._step_us = fine
                return fine
        self._step_us = min(self._step_us * 2, self.config.max_step_us)
        return self._step_us

    def _reschedule(self) -> None:
        self._step_us = self.config.fine_step_us
        if self.engine is None:
            return
        if self._step_handle is not None:
            self.engine.cancel(self._step_handle)
            self._step_handle = None
        if self._in_transient():
            self._step_handle = self.engine.schedule(
                self.now + self._next_step(), self._on_step_event
            )

    def _on_step_event(self, now: SimTime) -> None:
        self._step_handle = None
        self._advance_to(now)
        if self._in_transient():
            self._step_handle = self.engine.schedule(  # type: ignore[union-attr]
                now + self._next_step(), self._on_step_event
            )


def write_trace_csv(trace: list[tuple[int, str, float, float]], path: str | Path) -> None:
    """Persist a gate transient trace as CSV (time_us, branch, current_a, voltage_v)."""
    lines = ["time_us,branch,current_a,voltage_v"]
    lines += [f"{t},{b},{i:.6f},{v:.6f}" for t, b, i, v in trace]
    Path(path).write_text("\n".join(lines) + "\n")
