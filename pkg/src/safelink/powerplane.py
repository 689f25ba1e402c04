"""Power distribution: source selection, battery model, auxiliary rail budget.

Two battery boxes (eight LiPo cells each, 6750 mAh) and an optional
external 24 V supply feed one bus. The external supply always wins when
present; otherwise the higher-voltage pack is used, with a voltage
hysteresis and a minimum dwell time so the selection never chatters. A
pack with any cell below the cutoff voltage is ineligible and is evicted
immediately (eviction is the one switch the dwell timer does not block).

Battery charge is tracked in integer picocoulombs: a discharge step takes
whole microamps for whole microseconds, so drawn charge always equals the
recorded decrease exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from .protocol import TransitionLog
from .sim import SimTime

CELLS_PER_PACK = 8  # two 4S packs in series per battery box

# 1 mAh = 3.6 C = 3.6e12 pC; 1 uA * 1 us = 1 pC.
PC_PER_MAH = 3_600_000_000_000


def load_ocv_curve() -> list[tuple[float, float]]:
    data = resources.files("safelink").joinpath("data/battery_ocv.json")
    doc = json.loads(data.read_text())
    return [(float(s), float(v)) for s, v in doc["points"]]


def cell_ocv(soc: float, curve: list[tuple[float, float]]) -> float:
    """Open-circuit cell voltage at state of charge `soc`, piecewise linear."""
    if soc <= curve[0][0]:
        return curve[0][1]
    for (s0, v0), (s1, v1) in zip(curve, curve[1:]):
        if soc <= s1:
            return v0 + (v1 - v0) * (soc - s0) / (s1 - s0)
    return curve[-1][1]


class PackId(Enum):
    A = "a"
    B = "b"


class SourceSelection(Enum):
    EXTERNAL_24V = "external_24v"
    PACK_A = "pack_a"
    PACK_B = "pack_b"
    NO_SOURCE = "no_source"


_PACK_SELECTION = {PackId.A: SourceSelection.PACK_A, PackId.B: SourceSelection.PACK_B}
_SELECTION_PACK = {v: k for k, v in _PACK_SELECTION.items()}


@dataclass
class BatteryPack:
    """Coulomb-counted battery box; cells deplete uniformly.

    `cell_offsets_v` lets tests and traces model an unbalanced box: the
    offset is added to the computed per-cell voltage.
    """

    pack_id: PackId
    capacity_mah: int = 6750
    internal_resistance_ohm: float = 0.096
    ocv_curve: list[tuple[float, float]] = field(default_factory=load_ocv_curve)
    charge_pc: int = field(default=-1)
    cell_offsets_v: list[float] = field(default_factory=lambda: [0.0] * CELLS_PER_PACK)
    undervoltage: bool = False

    def __post_init__(self) -> None:
        if self.capacity_mah <= 0:
            raise ValueError("capacity must be positive")
        if self.charge_pc < 0:
            self.charge_pc = self.capacity_mah * PC_PER_MAH

    @property
    def capacity_pc(self) -> int:
        return self.capacity_mah * PC_PER_MAH

    @property
    def soc(self) -> float:
        return self.charge_pc / self.capacity_pc

    @property
    def charge_remaining_mah(self) -> float:
        return self.charge_pc / PC_PER_MAH

    def cell_voltages(self, load_current_a: float = 0.0) -> list[float]:
        ocv = cell_ocv(self.soc, self.ocv_curve)
        sag = load_current_a * self.internal_resistance_ohm / CELLS_PER_PACK
        return [ocv - sag + off for off in self.cell_offsets_v]

    def pack_voltage(self, load_current_a: float = 0.0) -> float:
        return sum(self.cell_voltages(load_current_a))


@dataclass
class DischargeResult:
    drawn_pc: int
    clamped: bool
    terminal_voltage_v: float


def discharge_step(pack: BatteryPack, load_current_a: float, dt_us: int) -> DischargeResult:
    """Draw `load_current_a` from the pack for `dt_us`.

    The current is quantised to whole microamps so the charge ledger stays
    exact. Drawing from an empty pack clamps at zero charge and flags
    undervoltage.
    """
    if dt_us <= 0:
        raise ValueError("dt_us must be positive")
    if load_current_a < 0.0:
        raise ValueError("load current must be non-negative")
    load_ua = round(load_current_a * 1_000_000)
    delta_pc = load_ua * dt_us
    drawn = min(delta_pc, pack.charge_pc)
    clamped = drawn < delta_pc
    pack.charge_pc -= drawn
    if clamped or pack.charge_pc == 0:
        pack.undervoltage = True
    ocv = cell_ocv(pack.soc, pack.ocv_curve) * CELLS_PER_PACK
    terminal = ocv - (load_ua / 1e6) * pack.internal_resistance_ohm
    return DischargeResult(drawn_pc=drawn, clamped=clamped, terminal_voltage_v=terminal)


@dataclass(frozen=True)
class PdbConfig:
    cell_warning_v: float = 3.3
    cell_cutoff_v: float = 3.0
    switch_hysteresis_v: float = 0.5
    min_dwell_us: SimTime = 1_000_000
    aux_budget_w: float = 50.0
    aux_rails: tuple[float, ...] = (5.0, 12.0)

    def __post_init__(self) -> None:
        if self.cell_cutoff_v >= self.cell_warning_v:
            raise ValueError("cutoff must lie below the warning threshold")
        if self.switch_hysteresis_v <= 0.0:
            raise ValueError("hysteresis must be positive")


@dataclass
class CellReport:
    warnings: dict[PackId, tuple[bool, ...]]
    eligible: dict[PackId, bool]

    def any_warning(self, pack_id: PackId) -> bool:
        return any(self.warnings[pack_id])


class AuxBudgetExceeded(Exception):
    """An auxiliary rail request would overrun the shared power budget."""

    def __init__(self, rail_v: float, requested_w: float, remaining_w: float) -> None:
        self.rail_v = rail_v
        self.requested_w = requested_w
        self.remaining_w = remaining_w
        super().__init__(
            f"{requested_w:.1f} W on the {rail_v:g} V rail exceeds the budget; "
            f"{remaining_w:.1f} W remaining"
        )


class PowerDistribution:
    """Source selection plus the shared 50 W auxiliary budget."""

    def __init__(self, config: PdbConfig | None = None, log: TransitionLog | None = None) -> None:
        self.config = config or PdbConfig()
        self.log = log
        self.selection = SourceSelection.NO_SOURCE
        self.external_present = False
        self.last_switch_time: SimTime | None = None
        self.aux_grants: list[tuple[float, float]] = []

    # -- monitoring ---------------------------------------------------------

    def monitor_cells(self, packs: dict[PackId, BatteryPack]) -> CellReport:
        """Per-cell warning flags and per-pack selection eligibility."""
        warnings: dict[PackId, tuple[bool, ...]] = {}
        eligible: dict[PackId, bool] = {}
        for pack_id, pack in packs.items():
            cells = pack.cell_voltages()
            warnings[pack_id] = tuple(v < self.config.cell_warning_v for v in cells)
            eligible[pack_id] = all(v >= self.config.cell_cutoff_v for v in cells)
        return CellReport(warnings=warnings, eligible=eligible)

    # -- source selection ----------------------------------------------------

    def select_source(
        self,
        packs: dict[PackId, BatteryPack],
        external_present: bool,
        now: SimTime,
    ) -> SourceSelection:
        """Re-evaluate the input source.

        External power has absolute priority. Between packs, a switch away
        from the current pack happens only when the other pack leads by the
        hysteresis margin and the minimum dwell has elapsed; losing
        eligibility forces an immediate move regardless of both.
        """
        self.external_present = external_present
        report = self.monitor_cells(packs)
        new = self._decide(packs, report, external_present, now)
        if new is not self.selection:
            if new in _SELECTION_PACK and self.selection in _SELECTION_PACK:
                self.last_switch_time = now
            elif new in _SELECTION_PACK:
                # (re)acquiring a pack from external/none also starts a dwell
                self.last_switch_time = now
            if self.log is not None:
                self.log.add(now, "pdb.selection", self.selection.value, new.value, "select")
            self.selection = new
        return self.selection

    def _decide(
        self,
        packs: dict[PackId, BatteryPack],
        report: CellReport,
        external_present: bool,
        now: SimTime,
    ) -> SourceSelection:
        if external_present:
            return SourceSelection.EXTERNAL_24V
        eligible = [pid for pid in (PackId.A, PackId.B) if pid in packs and report.eligible[pid]]
        if not eligible:
            return SourceSelection.NO_SOURCE
        current_pack = _SELECTION_PACK.get(self.selection)
        if current_pack in eligible:
            voltage = {pid: packs[pid].pack_voltage() for pid in eligible}
            best = max(eligible, key=lambda pid: (voltage[pid], pid is current_pack))
            if best is current_pack:
                return self.selection
            margin = voltage[best] - voltage[current_pack]
            dwell_ok = (
                self.last_switch_time is None
                or now - self.last_switch_time >= self.config.min_dwell_us
            )
            if margin >= self.config.switch_hysteresis_v and dwell_ok:
                return _PACK_SELECTION[best]
            return self.selection
        # Current source unavailable (external gone, fresh start, or the
        # selected pack lost eligibility): acquire the best eligible pack.
        best = max(eligible, key=lambda pid: (packs[pid].pack_voltage(), pid is PackId.A))
        return _PACK_SELECTION[best]

    # -- auxiliary rails ------------------------------------------------------

    def aux_granted_w(self) -> float:
        return sum(w for _, w in self.aux_grants)

    def aux_draw(self, requests: list[tuple[float, float]]) -> list[tuple[float, float]]:
        """Grant `(rail_v, watts)` requests against the shared budget.

        Requests are processed in order; the first one that would overrun
        the budget raises AuxBudgetExceeded reporting the remaining head
        room, and nothing from that call is granted.
        """
        for rail_v, watts in requests:
            if rail_v not in self.config.aux_rails:
                raise ValueError(f"unknown auxiliary rail {rail_v!r} V")
            if watts < 0.0:
                raise ValueError("aux power request must be non-negative")
        granted = self.aux_granted_w()
        for rail_v, watts in requests:
            if granted + watts > self.config.aux_budget_w:
                raise AuxBudgetExceeded(rail_v, watts, self.config.aux_budget_w - granted)
            granted += watts
        self.aux_grants.extend(requests)
        return list(self.aux_grants)

    def aux_release_all(self) -> None:
        self.aux_grants.clear()


def write_state_csv(
    rows: list[tuple[int, str, float, float, bool]], path: str | Path
) -> None:
    """Persist a selection trace as CSV
    (time_us, selection, pack_a_v, pack_b_v, external_present)."""
    lines = ["time_us,selection,pack_a_v,pack_b_v,external_present"]
    lines += [f"{t},{sel},{va:.3f},{vb:.3f},{int(ext)}" for t, sel, va, vb, ext in rows]
    Path(path).write_text("\n".join(lines) + "\n")
