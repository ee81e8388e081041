"""
Command-line entry point: run scenarios, compare engine modes, run workload
profiles, replay recorded streams and re-render reports.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import config
from bench_harness import (
    EngineRun,
    EventStore,
    GateError,
    Harness,
    PersistenceError,
    ProfileKind,
    RunReport,
    WorkloadProfile,
    crud_cycle,
    load_run,
    render,
    report,
    run_replay,
)
from config import ConfigError, RunConfig, resolve_run_config
from device_sim import DeviceSpec, init_fleet, load_fleet_specs
from fuzzy_engine import FuzzyConfig, FuzzyConfigError, load_fuzzy_config
from hybrid_pipeline import CsfMap, EngineMode, HybridPipeline, load_csf_map
from message_bus import ReplayError
from metrics import LatencySample
from rete_engine import CrispRule, RuleCompileError, load_rules
from scenario_injector import Scenario, ScenarioLoadError, Simulation, resolve_scenario
from semantic_model import FeatureSpec, load_feature_spec

logger = logging.getLogger(__name__)

SUCCESS_FLOOR = 0.999
CRUD_EVENTS = 100


@dataclass
class Inputs:
    specs: List[DeviceSpec]
    rules: List[CrispRule]
    fuzzy_cfg: FuzzyConfig
    feature_spec: FeatureSpec
    csf_map: CsfMap


def load_inputs(cfg: RunConfig) -> Inputs:
    return Inputs(
        specs=load_fleet_specs(cfg.fleet_path),
        rules=load_rules(cfg.rules_path),
        fuzzy_cfg=load_fuzzy_config(cfg.fuzzy_path),
        feature_spec=load_feature_spec(cfg.feature_spec_path),
        csf_map=load_csf_map(cfg.csf_path),
    )


def build_pipeline(inputs: Inputs, mode: EngineMode, sink: Optional[EventStore] = None) -> HybridPipeline:
    return HybridPipeline(inputs.rules, inputs.fuzzy_cfg, inputs.feature_spec, mode, inputs.csf_map, sink=sink)


def _banner(title: str) -> None:
    print("=" * 80)
    print(title)
    print("=" * 80)


def _open_store(run_dir: str, name: str, fsync: bool) -> EventStore:
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, name)
    if os.path.exists(path):
        os.remove(path)
    return EventStore(path, fsync=fsync)


def _crud_timings(run_dir: str, fsync: bool) -> Dict[str, List[float]]:
    with _open_store(run_dir, "crud.jsonl", fsync) as store:
        return crud_cycle(store, CRUD_EVENTS)


def check_samples(samples: Sequence[LatencySample]) -> List[str]:
    """Latency invariants every run must satisfy."""
    failures = []
    for s in samples:
        d = s.deltas
        if not s.t_src_ns <= s.t_rules_ns <= s.t_db_ns:
            failures.append(f"stage instants out of order on {s.topic}")
        elif d.d_end_ns != d.d_ingest_ns + d.d_rules_db_ns:
            failures.append(f"latency decomposition broken on {s.topic}")
    return failures


def check_gates(published: int, pipelines: Sequence[HybridPipeline], stores: Sequence[EventStore]) -> List[str]:
    failures = []
    for pipeline in pipelines:
        if pipeline.processed != published:
            failures.append(f"{pipeline.mode.value}: {published - pipeline.processed} messages lost")
        failures.extend(check_samples(pipeline.samples))
    for store in stores:
        if store.success_ratio < SUCCESS_FLOOR:
            failures.append(f"persistence success {store.success_ratio:.4f} below {SUCCESS_FLOOR}")
    return failures


def simulate(cfg: RunConfig, inputs: Inputs, scenario: Scenario, modes: Sequence[EngineMode],
             run_dir: str) -> Tuple[RunReport, List[str]]:
    """Run one scenario with every requested engine consuming the same stream."""
    stores = [_open_store(run_dir, f"events_{i}_{mode.value}.jsonl", cfg.fsync) for i, mode in enumerate(modes)]
    pipelines = [build_pipeline(inputs, mode, store) for mode, store in zip(modes, stores)]
    env = scenario.initial_environment(cfg.seed)
    fleet = init_fleet(inputs.specs, env, seed=cfg.seed)
    sim = Simulation(fleet, env, pipelines, tick_ms=cfg.tick_ms, speed=cfg.replay_speed,
                     record_path=cfg.record_path)
    try:
        result = sim.run(scenario, cfg.duration_ms)
    finally:
        for store in stores:
            store.close()
    failures = check_gates(result.published, pipelines, stores)
    run = RunReport(
        name=scenario.name,
        samples=list(pipelines[0].samples),
        ground_truth=list(result.ground_truth),
        engines=[EngineRun(p.mode, list(p.alerts), dict(p.band_counts)) for p in pipelines],
        crud=_crud_timings(run_dir, cfg.fsync),
        insert_by_channel={k: list(v) for k, v in stores[0].insert_by_channel.items()},
        csf_map=inputs.csf_map,
        meta={"uc": scenario.name, "seed": cfg.seed, "engines": [m.value for m in modes],
              "published": result.published, "duration_ms": result.duration_ms},
    )
    return run, failures


def _print_summary(run: RunReport, run_dir: str, failures: List[str]) -> None:
    for engine, result in run.detections():
        print(f"\n[{engine.value}] injections: {result.executed}  detected: {result.detected}  "
              f"false positives: {len(result.false_positives)}")
        for rec in result.records:
            t = "--" if rec.detection_time_ms is None else f"{rec.detection_time_ms:.2f} ms"
            print(f"   {rec.campaign:<6} {rec.ttp:<10} {rec.thing_id:<32} {rec.status.value:<12} {t}")
    print(f"\nReports written to {run_dir}")
    if failures:
        print("\nGATES FAILED:")
        for failure in failures:
            print(f"   - {failure}")
    else:
        print("\nAll gates passed")


def cmd_run(cfg: RunConfig) -> int:
    if not cfg.scenario:
        raise ConfigError("run needs --scenario")
    inputs = load_inputs(cfg)
    scenario = resolve_scenario(cfg.scenario)
    mode = EngineMode.parse(cfg.engine)
    run_dir = os.path.join(cfg.report_dir, f"{scenario.name}-{mode.value}")
    _banner(f"RUN: {scenario.name} ({mode.value}, seed {cfg.seed})")
    run, failures = simulate(cfg, inputs, scenario, [mode], run_dir)
    report(run, run_dir)
    _print_summary(run, run_dir, failures)
    return 1 if failures else 0


def cmd_compare(cfg: RunConfig, modes: Sequence[EngineMode] = (EngineMode.DETERMINISTIC, EngineMode.HYBRID)) -> int:
    if not cfg.scenario:
        raise ConfigError("compare needs --scenario")
    inputs = load_inputs(cfg)
    scenario = resolve_scenario(cfg.scenario)
    if not scenario.events:
        raise ScenarioLoadError(f"scenario '{scenario.name}' has no ground truth to compare against")
    run_dir = os.path.join(cfg.report_dir, f"{scenario.name}-compare")
    _banner(f"COMPARE: {scenario.name} ({' vs '.join(m.value for m in modes)}, seed {cfg.seed})")
    run, failures = simulate(cfg, inputs, scenario, modes, run_dir)
    report(run, run_dir)
    _print_summary(run, run_dir, failures)
    return 1 if failures else 0


def cmd_bench(cfg: RunConfig, repeat: int = 3) -> int:
    inputs = load_inputs(cfg)
    mode = EngineMode.parse(cfg.engine)
    run_dir = os.path.join(cfg.report_dir, f"bench-{cfg.profile}")
    duration_s = None if cfg.duration_ms is None else cfg.duration_ms / 1000.0
    harness = Harness(inputs.specs, cfg.seed, cfg.replay_speed)
    store = _open_store(run_dir, "events.jsonl", cfg.fsync)
    pipeline = build_pipeline(inputs, mode, store)
    _banner(f"BENCH: {cfg.profile} x{repeat} ({mode.value})")
    failures: List[str] = []
    try:
        for index in range(repeat):
            profiles = [WorkloadProfile.named("smoke", duration_s)]
            if cfg.profile != ProfileKind.SMOKE.value:
                profiles.append(WorkloadProfile.named(cfg.profile, duration_s))
            for profile in profiles:
                try:
                    result = harness.run(profile, pipeline)
                except GateError as e:
                    failures.append(str(e))
                    continue
                print(f"   run {index + 1} {profile.kind.value:<9} published {result.published:>7}  "
                      f"processed {result.processed:>7}  {result.throughput:10.1f} msg/s  "
                      f"success {result.success_ratio:.4f}  {'PASS' if result.passed else 'FAIL'}")
                if not result.passed:
                    failures.append(f"run {index + 1} {profile.kind.value}: gate failed")
    finally:
        store.close()
    failures.extend(check_samples(pipeline.samples))
    run = RunReport(
        name=f"bench-{cfg.profile}",
        samples=list(pipeline.samples),
        engines=[EngineRun(mode, list(pipeline.alerts), dict(pipeline.band_counts))],
        crud=_crud_timings(run_dir, cfg.fsync),
        insert_by_channel={k: list(v) for k, v in store.insert_by_channel.items()},
        workloads=[r.to_dict() for r in harness.results],
        csf_map=inputs.csf_map,
        meta={"uc": f"bench-{cfg.profile}", "seed": cfg.seed, "repeat": repeat},
    )
    report(run, run_dir)
    print(f"\nReports written to {run_dir}")
    return 1 if failures else 0


def cmd_replay(cfg: RunConfig, source_path: str) -> int:
    if not os.path.isfile(source_path):
        raise ReplayError(f"record file not found: {source_path}")
    inputs = load_inputs(cfg)
    mode = EngineMode.parse(cfg.engine)
    name = os.path.splitext(os.path.basename(source_path))[0]
    run_dir = os.path.join(cfg.report_dir, f"replay-{name}-{mode.value}")
    store = _open_store(run_dir, "events.jsonl", cfg.fsync)
    pipeline = build_pipeline(inputs, mode, store)
    _banner(f"REPLAY: {source_path} (speed {cfg.replay_speed:g}, {mode.value})")
    try:
        result = run_replay(source_path, pipeline, cfg.replay_speed)
    finally:
        store.close()
    failures = check_samples(result.samples)
    if result.losses:
        failures.append(f"{result.losses} messages lost")
    if result.success_ratio < SUCCESS_FLOOR:
        failures.append(f"persistence success {result.success_ratio:.4f} below {SUCCESS_FLOOR}")
    run = RunReport(
        name=f"replay-{name}",
        samples=list(result.samples),
        engines=[EngineRun(mode, list(pipeline.alerts), dict(pipeline.band_counts))],
        insert_by_channel={k: list(v) for k, v in store.insert_by_channel.items()},
        workloads=[result.to_dict()],
        csf_map=inputs.csf_map,
        meta={"uc": name, "seed": cfg.seed, "published": result.published},
    )
    report(run, run_dir)
    print(f"   published {result.published}  processed {result.processed}  "
          f"{result.throughput:.1f} msg/s  alerts {len(pipeline.alerts)}")
    print(f"\nReports written to {run_dir}")
    return 1 if failures else 0


def cmd_report(run_dir: str) -> int:
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    written = render(load_run(run_dir), run_dir)
    _banner(f"REPORT: {run_dir}")
    for path in written:
        print(f"   {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hysectwin", description="Digital-twin security pipeline for a smart-lighting fleet")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", dest="config_file", help="JSON file with run configuration fields")
        p.add_argument("--fleet", dest="fleet_path")
        p.add_argument("--rules", dest="rules_path")
        p.add_argument("--fuzzy", dest="fuzzy_path")
        p.add_argument("--features", dest="feature_spec_path")
        p.add_argument("--csf", dest="csf_path")
        p.add_argument("--seed", type=int)
        p.add_argument("--engine", choices=["deterministic", "deterministic_only", "hybrid"])
        p.add_argument("--report-dir", dest="report_dir")
        p.add_argument("--speed", dest="replay_speed", type=float)
        p.add_argument("--duration-ms", dest="duration_ms", type=int)
        p.add_argument("--tick-ms", dest="tick_ms", type=int)
        p.add_argument("--no-fsync", dest="fsync", action="store_const", const=False)

    run = sub.add_parser("run", help="run a scenario through one engine mode")
    common(run)
    run.add_argument("--scenario")
    run.add_argument("--record", dest="record_path", help="write the published stream to this file")

    compare = sub.add_parser("compare", help="run a scenario through deterministic and hybrid modes")
    common(compare)
    compare.add_argument("--scenario")
    compare.add_argument("--modes", default="deterministic,hybrid", help="comma-separated engine modes")
    compare.add_argument("--record", dest="record_path")

    bench = sub.add_parser("bench", help="run workload profiles behind the smoke gate")
    common(bench)
    bench.add_argument("--profile", choices=[k.value for k in ProfileKind])
    bench.add_argument("--repeat", type=int, default=3)

    replay_p = sub.add_parser("replay", help="replay a recorded stream through the pipeline")
    common(replay_p)
    replay_p.add_argument("source", help="record file (one envelope per line)")

    report_p = sub.add_parser("report", help="re-render reports from a stored run")
    report_p.add_argument("run_dir")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    cli: Dict[str, Any] = {k: v for k, v in vars(args).items() if v is not None}
    return resolve_run_config(cli, os.environ, getattr(args, "config_file", None))


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        cfg = _resolve(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "compare":
            modes = [EngineMode.parse(m.strip()) for m in args.modes.split(",") if m.strip()]
            if len(modes) < 2:
                raise ConfigError("compare needs at least two engine modes")
            return cmd_compare(cfg, modes)
        if args.command == "bench":
            if args.repeat < 1:
                raise ConfigError(f"--repeat must be >= 1, got {args.repeat}")
            return cmd_bench(cfg, args.repeat)
        return cmd_replay(cfg, args.source)
    except (ConfigError, ScenarioLoadError, RuleCompileError, FuzzyConfigError, ReplayError,
            PersistenceError, FileNotFoundError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(json.dumps({"error": str(e)}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
