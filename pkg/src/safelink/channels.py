"""Statistical radio-link models and the five benchmark scenarios.

Each channel is a lossy pipe: an independent Bernoulli loss per frame, a
fixed airtime, a fixed base latency, and a log-normal jitter tail. A
delivered frame arrives at send_time + airtime + base_latency + jitter.
Scenario presets bundle per-channel parameters that were fitted against
measured end-to-end latency targets (see `calibrate`); the fitted files
ship with the package and carry their fit provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from .protocol import ALL_CHANNELS, FRAME_WIRE_BYTES, ChannelId, StatusFrame
from .sim import RandomSource, SimTime

SCENARIO_SCHEMA = "safelink-scenario@1"


@dataclass
class ChannelSpec:
    """Link model parameters for one channel in one scenario."""

    channel: ChannelId
    enabled: bool = True
    loss_probability: float = 0.0
    base_latency_us: int = 0
    jitter_sigma: float = 0.0
    jitter_scale_us: int = 0
    airtime_us: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError(f"loss_probability {self.loss_probability} outside [0, 1]")
        if min(self.base_latency_us, self.jitter_scale_us, self.airtime_us) < 0:
            raise ValueError("latency, jitter scale and airtime must be non-negative")
        if self.jitter_sigma < 0.0:
            raise ValueError("jitter sigma must be non-negative")


def transmit(
    frame: StatusFrame, spec: ChannelSpec, now: SimTime, rng: RandomSource
) -> SimTime | None:
    """Delivery time for `frame` on the link, or None if the frame is lost.

    Always consumes exactly three rng draws (one loss, two jitter), so
    draw sequences stay aligned when only the parameter values change.
    """
    if not spec.enabled:
        raise ValueError(f"transmit on disabled channel {spec.channel.value}")
    lost = rng.random() < spec.loss_probability
    z = rng.normal()
    if lost:
        return None
    if spec.jitter_scale_us > 0:
        jitter = int(round(spec.jitter_scale_us * math.exp(spec.jitter_sigma * z)))
    else:
        jitter = 0
    return now + spec.airtime_us + spec.base_latency_us + jitter


@dataclass(frozen=True)
class AirtimeConfig:
    """Linear on-air cost model for the slow link: fixed preamble/overhead
    plus a per-byte cost. Coarse on purpose; the observable being matched
    is the near-constant end-to-end cost per frame."""

    overhead_us: int = 235_000
    per_byte_us: int = 1_200


DEFAULT_LORA_AIRTIME = AirtimeConfig()


def lora_airtime(payload_bytes: int, config: AirtimeConfig = DEFAULT_LORA_AIRTIME) -> SimTime:
    """On-air duration of one slow-link frame of `payload_bytes`."""
    if payload_bytes <= 0:
        raise ValueError("payload_bytes must be positive")
    return config.overhead_us + config.per_byte_us * payload_bytes


class ScenarioName(Enum):
    LINE_OF_SIGHT_12M = "line_of_sight_12m"
    OBSTRUCTED_3M = "obstructed_3m"
    STONE_WALL_12M = "stone_wall_12m"
    GLASS_DOOR_12M = "glass_door_12m"
    LORA_ONLY_12M = "lora_only_12m"


@dataclass(frozen=True)
class LatencyTargets:
    """Measured release-latency statistics a scenario is fitted against."""

    mean_ms: float
    std_ms: float
    max_ms: float


# Measured 1000-toggle statistics per scenario (ms).
LATENCY_TARGETS: dict[ScenarioName, LatencyTargets] = {
    ScenarioName.LINE_OF_SIGHT_12M: LatencyTargets(8.0, 3.0, 29.0),
    ScenarioName.OBSTRUCTED_3M: LatencyTargets(8.0, 5.0, 113.0),
    ScenarioName.STONE_WALL_12M: LatencyTargets(33.0, 29.0, 128.0),
    ScenarioName.GLASS_DOOR_12M: LatencyTargets(8.0, 4.0, 62.0),
    ScenarioName.LORA_ONLY_12M: LatencyTargets(249.0, 4.0, 268.0),
}


@dataclass
class ScenarioSpec:
    """A named radio environment: one ChannelSpec per channel."""

    name: str
    distance_m: float
    channels: dict[ChannelId, ChannelSpec]
    provenance: dict | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for ch in ALL_CHANNELS:
            if ch not in self.channels:
                raise ValueError(f"scenario {self.name!r} is missing channel {ch.value}")

    def enabled_channels(self) -> tuple[ChannelId, ...]:
        return tuple(ch for ch in ALL_CHANNELS if self.channels[ch].enabled)

    def spec(self, channel: ChannelId) -> ChannelSpec:
        return self.channels[channel]


def scenario_to_dict(scenario: ScenarioSpec) -> dict:
    doc: dict = {
        "schema": SCENARIO_SCHEMA,
        "name": scenario.name,
        "distance_m": scenario.distance_m,
        "channels": [
            {
                "id": spec.channel.value,
                "enabled": spec.enabled,
                "loss_probability": spec.loss_probability,
                "base_latency_us": spec.base_latency_us,
                "jitter_sigma": spec.jitter_sigma,
                "jitter_scale_us": spec.jitter_scale_us,
                "airtime_us": spec.airtime_us,
            }
            for spec in (scenario.channels[ch] for ch in ALL_CHANNELS)
        ],
    }
    if scenario.provenance is not None:
        doc["provenance"] = scenario.provenance
    return doc


def scenario_from_dict(doc: dict) -> ScenarioSpec:
    if doc.get("schema", SCENARIO_SCHEMA) != SCENARIO_SCHEMA:
        raise ValueError(f"unsupported scenario schema {doc.get('schema')!r}")
    channels: dict[ChannelId, ChannelSpec] = {}
    for entry in doc["channels"]:
        ch = ChannelId(entry["id"])
        channels[ch] = ChannelSpec(
            channel=ch,
            enabled=bool(entry["enabled"]),
            loss_probability=float(entry["loss_probability"]),
            base_latency_us=int(entry["base_latency_us"]),
            jitter_sigma=float(entry["jitter_sigma"]),
            jitter_scale_us=int(entry["jitter_scale_us"]),
            airtime_us=int(entry["airtime_us"]),
        )
    return ScenarioSpec(
        name=doc["name"],
        distance_m=float(doc.get("distance_m", 0.0)),
        channels=channels,
        provenance=doc.get("provenance"),
    )


def save_scenario(scenario: ScenarioSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n")


def load_scenario(path: str | Path) -> ScenarioSpec:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def preset(name: ScenarioName | str) -> ScenarioSpec:
    """Shipped, calibration-fitted scenario. Accepts the enum or its value."""
    if isinstance(name, str):
        try:
            name = ScenarioName(name)
        except ValueError:
            known = ", ".join(n.value for n in ScenarioName)
            raise ValueError(f"unknown scenario {name!r}; known scenarios: {known}") from None
    data = resources.files("safelink").joinpath(f"data/presets/{name.value}.json")
    scenario = scenario_from_dict(json.loads(data.read_text()))
    if name is ScenarioName.LORA_ONLY_12M:
        assert scenario.enabled_channels() == (ChannelId.SLOW,)
    return scenario


def preset_names() -> tuple[str, ...]:
    return tuple(n.value for n in ScenarioName)


def ideal_scenario() -> ScenarioSpec:
    """All three channels lossless with zero latency, jitter and airtime.

    Isolates everything downstream of the radio: with this scenario any
    measured latency is contributed by the power gate alone.
    """
    return ScenarioSpec(
        name="ideal",
        distance_m=0.0,
        channels={ch: ChannelSpec(channel=ch) for ch in ALL_CHANNELS},
    )


def default_frame_airtime(config: AirtimeConfig = DEFAULT_LORA_AIRTIME) -> SimTime:
    """Airtime of one status frame at the default wire size."""
    return lora_airtime(FRAME_WIRE_BYTES, config)


def iter_presets() -> Iterable[ScenarioSpec]:
    for name in ScenarioName:
        yield preset(name)
