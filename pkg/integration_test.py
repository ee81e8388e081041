"""
Integration Test: fleet -> bus -> twin -> rules/fuzzy -> reports
Shows how the modules fit together on one campaign scenario.
"""
import os
import tempfile

from bench_harness import EngineRun, EventStore, RunReport, coverage_table, improvement_table, load_run, report
from config import DATA_DIR
from device_sim import init_fleet, load_fleet_specs
from fuzzy_engine import load_fuzzy_config
from hybrid_pipeline import EngineMode, HybridPipeline, load_csf_map
from rete_engine import load_rules
from scenario_injector import Simulation, resolve_scenario
from semantic_model import load_feature_spec


def _banner(title):
    print("\n" + "=" * 80)
    print(title)
    print("=" * 80)


def run_pipeline(work_dir):
    _banner("INTEGRATION TEST: uc1_c0012, deterministic vs hybrid")

    # ------------------------------------------------------------------
    _banner("[1/4] Loading fleet, rules and fuzzy configuration")
    specs = load_fleet_specs(os.path.join(DATA_DIR, "fleet.json"))
    rules = load_rules(os.path.join(DATA_DIR, "rules.json"))
    fuzzy_cfg = load_fuzzy_config(os.path.join(DATA_DIR, "fuzzy.json"))
    feature_spec = load_feature_spec(os.path.join(DATA_DIR, "feature_spec.json"))
    csf_map = load_csf_map(os.path.join(DATA_DIR, "csf_tags.json"))
    print(f"   {len(specs)} devices, {len(rules)} rules, {fuzzy_cfg.dimension} fuzzy inputs")

    # ------------------------------------------------------------------
    _banner("[2/4] Running the scenario on the virtual clock")
    scenario = resolve_scenario("uc1_c0012")
    modes = [EngineMode.DETERMINISTIC, EngineMode.HYBRID]
    stores = [EventStore(os.path.join(work_dir, f"events_{m.value}.jsonl"), fsync=False) for m in modes]
    pipelines = [HybridPipeline(rules, fuzzy_cfg, feature_spec, m, csf_map, sink=s) for m, s in zip(modes, stores)]
    env = scenario.initial_environment()
    fleet = init_fleet(specs, env, seed=scenario.seed)
    result = Simulation(fleet, env, pipelines).run(scenario)
    for store in stores:
        store.close()
    print(f"   published {result.published} envelopes, {len(result.ground_truth)} injections")
    for p in pipelines:
        print(f"   {p.mode.value:<14} processed {p.processed}  alerts {len(p.alerts)}  suppressed {p.suppressed}")

    # ------------------------------------------------------------------
    _banner("[3/4] Writing and reloading the report set")
    run = RunReport(
        name=scenario.name,
        samples=list(pipelines[0].samples),
        ground_truth=list(result.ground_truth),
        engines=[EngineRun(p.mode, list(p.alerts), dict(p.band_counts)) for p in pipelines],
        insert_by_channel={k: list(v) for k, v in stores[0].insert_by_channel.items()},
        csf_map=csf_map,
        meta={"uc": "UC1", "seed": scenario.seed},
    )
    run_dir = os.path.join(work_dir, "uc1")
    written = report(run, run_dir)
    for path in written:
        print(f"   {os.path.basename(path)}")
    reloaded = load_run(run_dir)

    # ------------------------------------------------------------------
    _banner("[4/4] Detection summary")
    print(coverage_table(reloaded).to_string(index=False))
    print()
    print(improvement_table(reloaded).to_string(index=False))
    return result, pipelines, reloaded


def test_end_to_end():
    with tempfile.TemporaryDirectory() as work_dir:
        result, pipelines, reloaded = run_pipeline(work_dir)
    assert all(p.processed == result.published for p in pipelines)
    coverage = coverage_table(reloaded)
    assert list(coverage["Detected"]) == [3, 3]
    assert list(coverage["Detection Coverage (%)"]) == [100.0, 100.0]
    assert len(reloaded.samples) == result.published


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(tmp)
    print("\n✅ Integration run complete")
