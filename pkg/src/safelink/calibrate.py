"""Deterministic fitting of channel parameters to measured latency targets.

The search is a coordinate-descent/grid hybrid: one parameter at a time is
swept over a small multiplicative grid, keeping the best value, cycling
until a full sweep brings no improvement. Every candidate is scored by
running the toggle experiment itself (reduced toggle count) with a fixed
seed, so the whole fit is reproducible and needs no gradient assumptions.

The objective is a weighted relative squared error over (mean, std, max).
The max is a high-variance sample statistic, so it gets a small weight,
plus a steep penalty once the simulated max approaches twice the target
(the hard acceptance ceiling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .channels import ChannelSpec, LatencyTargets, ScenarioSpec
from .protocol import ChannelId, ScheduleConfig


@dataclass
class SearchConfig:
    toggles: int = 400
    seed: int = 7
    max_sweeps: int = 12
    weight_mean: float = 1.0
    weight_std: float = 0.25
    weight_max: float = 0.02
    max_cap_factor: float = 1.5
    hard_cap_factor: float = 2.0
    reference_toggles: int = 1000
    error_threshold: float = 0.04


@dataclass
class FitReport:
    converged: bool
    error: float
    sweeps: int
    evaluations: int
    simulated: dict[str, float]
    targets: dict[str, float]
    parameters: dict[str, float] = field(default_factory=dict)


# (channel-class, field, is_int, lower bound, upper bound)
_FAST = (ChannelId.FAST_A, ChannelId.FAST_B)
_SLOW = (ChannelId.SLOW,)
_SEARCH_AXES: list[tuple[tuple[ChannelId, ...], str, bool, float, float]] = [
    (_FAST, "loss_probability", False, 0.0, 0.95),
    (_FAST, "base_latency_us", True, 0.0, 400_000.0),
    (_FAST, "jitter_scale_us", True, 0.0, 200_000.0),
    (_FAST, "jitter_sigma", False, 0.05, 1.5),
    (_SLOW, "loss_probability", False, 0.0, 0.95),
    (_SLOW, "airtime_us", True, 0.0, 500_000.0),
    (_SLOW, "jitter_scale_us", True, 0.0, 200_000.0),
    (_SLOW, "jitter_sigma", False, 0.05, 1.5),
]
_GRID = (0.6, 0.8, 1.25, 1.6)
_LOSS_STEPS = (-0.08, -0.02, -0.005, 0.005, 0.02, 0.08)


def _get(scenario: ScenarioSpec, channels: tuple[ChannelId, ...], fieldname: str) -> float:
    return getattr(scenario.channels[channels[0]], fieldname)


def _with(
    scenario: ScenarioSpec, channels: tuple[ChannelId, ...], fieldname: str, value: float
) -> ScenarioSpec:
    new_channels: dict[ChannelId, ChannelSpec] = dict(scenario.channels)
    for ch in channels:
        new_channels[ch] = replace(new_channels[ch], **{fieldname: value})
    return replace(scenario, channels=new_channels)


def _objective(
    stats, scenario: ScenarioSpec, targets: LatencyTargets, search: SearchConfig
) -> float:
    err = 0.0
    err += search.weight_mean * ((stats.mean_ms - targets.mean_ms) / targets.mean_ms) ** 2
    std_ref = max(targets.std_ms, 0.5)
    err += search.weight_std * ((stats.std_ms - targets.std_ms) / std_ref) ** 2
    err += search.weight_max * ((stats.max_ms - targets.max_ms) / targets.max_ms) ** 2
    cap = search.max_cap_factor * targets.max_ms
    if stats.max_ms > cap:
        err += 25.0 * ((stats.max_ms - cap) / targets.max_ms) ** 2
    err += _rare_tail_penalty(scenario, targets, search)
    return err


def _rare_tail_penalty(
    scenario: ScenarioSpec, targets: LatencyTargets, search: SearchConfig
) -> float:
    """Expected count (per reference run) of first-retransmission samples
    beyond the hard ceiling. A finite fit run cannot observe rare-event
    tails reliably, so this term is computed from the parameters: losing
    both immediate fast frames defers a release by one fast period."""
    fast = scenario.channels[ChannelId.FAST_A]
    fast_b = scenario.channels[ChannelId.FAST_B]
    if not (fast.enabled and fast_b.enabled):
        return 0.0
    period = ScheduleConfig().fast_period
    jitter_tail = fast.jitter_scale_us * math.exp(2.0 * fast.jitter_sigma)
    rung_ms = (fast.base_latency_us + fast.airtime_us + period + jitter_tail) / 1_000 + 0.5
    if rung_ms <= search.hard_cap_factor * targets.max_ms:
        return 0.0
    p_defer = fast.loss_probability * fast_b.loss_probability
    return 0.5 * search.reference_toggles * p_defer


def _evaluate(scenario: ScenarioSpec, targets: LatencyTargets, search: SearchConfig):
    from .harness import ExperimentConfig, Measure, run_toggle_experiment

    config = ExperimentConfig(
        scenario=scenario,
        toggles=search.toggles,
        seed=search.seed,
        measure=Measure.RELEASE,
    )
    report = run_toggle_experiment(config)
    stats = report.primary_stats()
    return stats, _objective(stats, scenario, targets, search)


def calibrate_scenario(
    initial: ScenarioSpec,
    targets: LatencyTargets,
    search: SearchConfig | None = None,
) -> tuple[ScenarioSpec, FitReport]:
    """Fit the scenario's channel parameters to the latency targets.

    Returns the fitted scenario and a report with the final error; a fit
    that stays above the error threshold is reported as not converged, it
    is never hidden.
    """
    search = search or SearchConfig()
    best = initial
    best_stats, best_err = _evaluate(best, targets, search)
    evaluations = 1
    sweeps = 0
    enabled = set(initial.enabled_channels())
    axes = [ax for ax in _SEARCH_AXES if any(ch in enabled for ch in ax[0])]
    for sweeps in range(1, search.max_sweeps + 1):
        improved = False
        for channels, fieldname, is_int, lo, hi in axes:
            current = _get(best, channels, fieldname)
            if fieldname == "loss_probability":
                candidates = [min(max(current + step, lo), hi) for step in _LOSS_STEPS]
            else:
                candidates = [min(max(current * g, lo), hi) for g in _GRID]
                if current == 0:
                    candidates += [1_000.0, 5_000.0]
            for cand in candidates:
                if is_int:
                    cand = int(round(cand))
                if cand == current:
                    continue
                trial = _with(best, channels, fieldname, cand)
                stats, err = _evaluate(trial, targets, search)
                evaluations += 1
                if err < best_err:
                    best, best_err, best_stats = trial, err, stats
                    current = cand
                    improved = True
        if not improved or best_err <= search.error_threshold:
            break
    parameters = {}
    for channels, fieldname, _, _, _2 in axes:
        label = "fast" if channels is _FAST else "slow"
        parameters[f"{label}.{fieldname}"] = _get(best, channels, fieldname)
    report = FitReport(
        converged=best_err <= search.error_threshold,
        error=best_err,
        sweeps=sweeps,
        evaluations=evaluations,
        simulated={
            "mean_ms": best_stats.mean_ms,
            "std_ms": best_stats.std_ms,
            "max_ms": best_stats.max_ms,
        },
        targets={
            "mean_ms": targets.mean_ms,
            "std_ms": targets.std_ms,
            "max_ms": targets.max_ms,
        },
        parameters=parameters,
    )
    fitted = replace(
        best,
        provenance={
            "targets": report.targets,
            "fit_error": round(report.error, 6),
            "seed": search.seed,
        },
    )
    return fitted, report
