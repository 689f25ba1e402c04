"""Command-line front end.

Subcommands: `run` (toggle experiment), `probe-watchdog`, `calibrate`,
`list-scenarios`. Exit codes: 0 success, 1 usage error, 2 aborted
experiment. The default seed can be overridden with the SAFELINK_SEED
environment variable; an explicit --seed flag wins.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import channels as ch
from .calibrate import SearchConfig, calibrate_scenario
from .harness import (
    DEFAULT_SEED,
    ExperimentAborted,
    ExperimentConfig,
    Measure,
    ProbeConfig,
    export_report,
    export_reports_csv,
    run_toggle_experiment,
    run_watchdog_probe,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORTED = 2


def _default_seed() -> int:
    env = os.environ.get("SAFELINK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"SAFELINK_SEED must be an integer, got {env!r}")
    return DEFAULT_SEED


def _resolve_scenarios(arg: str) -> list[ch.ScenarioSpec]:
    if arg == "all":
        return list(ch.iter_presets())
    out = []
    for token in arg.split(","):
        token = token.strip()
        if token in ch.preset_names():
            out.append(ch.preset(token))
        elif Path(token).exists():
            out.append(ch.load_scenario(token))
        else:
            raise SystemExit(
                f"unknown scenario {token!r}: not a preset name "
                f"({', '.join(ch.preset_names())}) and not a file"
            )
    return out


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _cmd_run(args: argparse.Namespace) -> int:
    scenarios = _resolve_scenarios(args.scenario)
    reports = []
    for scenario in scenarios:
        config = ExperimentConfig(
            scenario=scenario,
            toggles=args.toggles,
            seed=args.seed,
            measure=Measure(args.measure),
        )
        t0 = time.perf_counter()
        report = run_toggle_experiment(config)
        elapsed = time.perf_counter() - t0
        stats = report.primary_stats()
        print(
            f"{scenario.name}: mean {stats.mean_ms:.1f} ms  std {stats.std_ms:.1f} ms  "
            f"max {stats.max_ms:.1f} ms  ({report.toggles} toggles, "
            f"{report.events_processed} events, {elapsed:.2f} s wall)",
            file=sys.stderr,
        )
        reports.append(report)
    if args.format == "csv":
        _emit(export_reports_csv(reports), args.out)
    elif len(reports) == 1:
        _emit(export_report(reports[0], "json"), args.out)
    else:
        docs = [r.to_dict() for r in sorted(reports, key=lambda r: r.scenario)]
        _emit(json.dumps(docs, indent=2) + "\n", args.out)
    return EXIT_OK


def _cmd_probe(args: argparse.Namespace) -> int:
    (scenario,) = _resolve_scenarios(args.scenario)
    config = ProbeConfig(scenario=scenario, probes=args.probes, seed=args.seed)
    report = run_watchdog_probe(config)
    stats = report.trip_stats
    print(
        f"{scenario.name}: trip min {stats.min_ms:.3f} ms  max {stats.max_ms:.3f} ms "
        f"({report.probes} probes)",
        file=sys.stderr,
    )
    _emit(export_report(report, args.format), args.out)
    return EXIT_OK


def _cmd_calibrate(args: argparse.Namespace) -> int:
    (scenario,) = _resolve_scenarios(args.scenario)
    name = scenario.name
    if args.targets:
        doc = json.loads(Path(args.targets).read_text())
        targets = ch.LatencyTargets(
            mean_ms=float(doc["mean_ms"]),
            std_ms=float(doc["std_ms"]),
            max_ms=float(doc["max_ms"]),
        )
    else:
        targets = ch.LATENCY_TARGETS[ch.ScenarioName(name)]
    search = SearchConfig(seed=args.seed, max_sweeps=args.max_iters)
    fitted, report = calibrate_scenario(scenario, targets, search)
    print(
        f"{name}: fit error {report.error:.4f} after {report.evaluations} runs "
        f"({'converged' if report.converged else 'NOT CONVERGED'}); "
        f"simulated mean {report.simulated['mean_ms']:.1f} ms vs target {targets.mean_ms:.1f} ms",
        file=sys.stderr,
    )
    if args.out:
        ch.save_scenario(fitted, args.out)
    else:
        sys.stdout.write(json.dumps(ch.scenario_to_dict(fitted), indent=2) + "\n")
    return EXIT_OK


def _cmd_list(args: argparse.Namespace) -> int:
    for name in ch.ScenarioName:
        targets = ch.LATENCY_TARGETS[name]
        scenario = ch.preset(name)
        enabled = ",".join(c.value for c in scenario.enabled_channels())
        print(
            f"{name.value:20s} distance {scenario.distance_m:4.0f} m  channels [{enabled}]  "
            f"target {targets.mean_ms:.0f}±{targets.std_ms:.0f} ms (max {targets.max_ms:.0f})"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safelink",
        description="Deterministic remote E-Stop link and power-gate simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the toggle latency experiment")
    run.add_argument("--scenario", default="all", help="preset name, file path, comma list, or 'all'")
    run.add_argument("--toggles", type=int, default=1000)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--format", choices=("json", "csv"), default="json")
    run.add_argument("--out", default=None, help="output path ('-' for stdout)")
    run.add_argument("--measure", choices=[m.value for m in Measure], default="both")
    run.set_defaults(func=_cmd_run)

    probe = sub.add_parser("probe-watchdog", help="measure fail-safe trip latency")
    probe.add_argument("--scenario", default="line_of_sight_12m")
    probe.add_argument("--probes", type=int, default=1000)
    probe.add_argument("--seed", type=int, default=None)
    probe.add_argument("--format", choices=("json", "csv"), default="json")
    probe.add_argument("--out", default=None)
    probe.set_defaults(func=_cmd_probe)

    cal = sub.add_parser("calibrate", help="fit channel parameters to latency targets")
    cal.add_argument("--scenario", required=True)
    cal.add_argument("--targets", default=None, help="JSON file with mean_ms/std_ms/max_ms")
    cal.add_argument("--max-iters", type=int, default=12)
    cal.add_argument("--seed", type=int, default=None)
    cal.add_argument("--out", default=None, help="write the fitted scenario JSON here")
    cal.set_defaults(func=_cmd_calibrate)

    ls = sub.add_parser("list-scenarios", help="list shipped scenario presets")
    ls.set_defaults(func=_cmd_list)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = _default_seed()
    try:
        return args.func(args)
    except ExperimentAborted as exc:
        print(f"experiment aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
