"""safelink: deterministic simulator for a redundant-radio remote E-Stop
link, the robot-side power gate it drives, and the battery power plane.

The package reproduces a 1000-toggle latency benchmark across five radio
scenarios; see the README for the CLI and the acceptance suite.
"""

from .channels import (
    AirtimeConfig,
    ChannelSpec,
    LatencyTargets,
    LATENCY_TARGETS,
    ScenarioName,
    ScenarioSpec,
    ideal_scenario,
    load_scenario,
    lora_airtime,
    preset,
    preset_names,
    save_scenario,
    transmit,
)
from .calibrate import FitReport, SearchConfig, calibrate_scenario
from .gate import (
    Branch,
    BranchConfig,
    EStopGate,
    GateConfig,
    GateState,
    LimiterConfig,
    default_gate_config,
)
from .harness import (
    DEFAULT_SEED,
    ExperimentAborted,
    ExperimentConfig,
    ExperimentReport,
    LatencyStats,
    Measure,
    ProbeConfig,
    ProbeReport,
    Rig,
    export_report,
    export_reports_csv,
    run_toggle_experiment,
    run_watchdog_probe,
)
from .powerplane import (
    AuxBudgetExceeded,
    BatteryPack,
    PackId,
    PdbConfig,
    PowerDistribution,
    SourceSelection,
    discharge_step,
)
from .protocol import (
    ChannelId,
    Direction,
    EStopCommand,
    LinkHealth,
    ProtocolError,
    Receiver,
    ScheduleConfig,
    Sender,
    StatusFrame,
    TransitionLog,
    WatchdogConfig,
)
from .sim import Engine, EventHandle, RandomSource, SimTime, US_PER_MS, US_PER_SEC

__version__ = "0.1.0"

__all__ = [
    "AirtimeConfig",
    "AuxBudgetExceeded",
    "BatteryPack",
    "Branch",
    "BranchConfig",
    "ChannelId",
    "ChannelSpec",
    "DEFAULT_SEED",
    "Direction",
    "EStopCommand",
    "EStopGate",
    "Engine",
    "EventHandle",
    "ExperimentAborted",
    "ExperimentConfig",
    "ExperimentReport",
    "FitReport",
    "GateConfig",
    "GateState",
    "LATENCY_TARGETS",
    "LatencyStats",
    "LatencyTargets",
    "LimiterConfig",
    "LinkHealth",
    "Measure",
    "PackId",
    "PdbConfig",
    "PowerDistribution",
    "ProbeConfig",
    "ProbeReport",
    "ProtocolError",
    "RandomSource",
    "Receiver",
    "Rig",
    "ScenarioName",
    "ScenarioSpec",
    "ScheduleConfig",
    "SearchConfig",
    "Sender",
    "SimTime",
    "SourceSelection",
    "StatusFrame",
    "TransitionLog",
    "US_PER_MS",
    "US_PER_SEC",
    "WatchdogConfig",
    "calibrate_scenario",
    "default_gate_config",
    "discharge_step",
    "export_report",
    "export_reports_csv",
    "ideal_scenario",
    "load_scenario",
    "lora_airtime",
    "preset",
    "preset_names",
    "run_toggle_experiment",
    "run_watchdog_probe",
    "save_scenario",
    "transmit",
]
