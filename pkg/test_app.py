import json
import os

import pandas as pd
import pytest

from app import main
from config import ConfigError, resolve_run_config


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in ("HST_REPORT_DIR", "HST_SEED", "HST_ENGINE", "HST_REPLAY_SPEED", "HST_FSYNC"):
        monkeypatch.delenv(key, raising=False)


def test_cli_overrides_env_overrides_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1, "tick_ms": 50, "engine": "hybrid"}), encoding="utf-8")
    env = {"HST_SEED": "2", "HST_FSYNC": "off"}
    assert resolve_run_config({}, {}, str(path)).seed == 1
    cfg = resolve_run_config({}, env, str(path))
    assert (cfg.seed, cfg.tick_ms, cfg.engine, cfg.fsync) == (2, 50, "hybrid", False)
    assert resolve_run_config({"seed": 3}, env, str(path)).seed == 3
    assert resolve_run_config({}, {}).to_dict()["report_dir"] == "reports"


@pytest.mark.parametrize("cli,message", [
    ({"engine": "neural"}, "unknown engine"),
    ({"profile": "soak"}, "unknown workload profile"),
    ({"replay_speed": -1.0}, "replay_speed"),
    ({"tick_ms": 0}, "tick_ms"),
    ({"rules_path": "/nonexistent/rules.json"}, "rules_path not found"),
    ({"seed": "seven"}, "invalid value for seed"),
])
def test_invalid_configuration(cli, message):
    with pytest.raises(ConfigError, match=message):
        resolve_run_config(cli, {})


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "colour": "blue"}), encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown config keys"):
        resolve_run_config({}, {}, str(bad))
    with pytest.raises(ConfigError, match="not found"):
        resolve_run_config({}, {}, str(tmp_path / "missing.json"))


def test_run_nominal_scenario(tmp_path, capsys):
    code = main(["run", "--scenario", "nominal_only", "--duration-ms", "5000",
                 "--report-dir", str(tmp_path), "--no-fsync"])
    assert code == 0
    run_dir = tmp_path / "nominal_only-deterministic"
    for name in ("run.json", "latency_live.csv", "latency_twin.csv", "latency_summary.csv", "detection.csv",
                 "crud.csv", "alerts.jsonl"):
        assert (run_dir / name).is_file(), name
    live = pd.read_csv(run_dir / "latency_live.csv")
    assert len(live) == 8
    assert "All gates passed" in capsys.readouterr().out


def test_compare_writes_improvement_table(tmp_path):
    code = main(["compare", "--scenario", "uc1_c0012", "--duration-ms", "55000",
                 "--report-dir", str(tmp_path), "--no-fsync"])
    assert code == 0
    table = pd.read_csv(tmp_path / "uc1_c0012-compare" / "improvement.csv", dtype=str)
    assert list(table["TTP"]) == ["T1021.002", "T1059", "T1112", "ALL"]
    detection = pd.read_csv(tmp_path / "uc1_c0012-compare" / "detection.csv", dtype=str)
    assert set(detection["Engine"]) == {"deterministic", "hybrid"}
    assert set(detection["Status"]) == {"detected"}


def test_compare_without_ground_truth_is_rejected(tmp_path, capsys):
    assert main(["compare", "--scenario", "nominal_only", "--report-dir", str(tmp_path)]) == 2
    assert "no ground truth" in json.loads(capsys.readouterr().out.strip().splitlines()[-1])["error"]


def test_compare_needs_two_modes(tmp_path):
    assert main(["compare", "--scenario", "uc1_c0012", "--modes", "hybrid", "--report-dir", str(tmp_path)]) == 2


def test_report_on_missing_dir_fails(tmp_path):
    assert main(["report", str(tmp_path / "nothing-here")]) == 2


def test_report_rerenders_deleted_tables(tmp_path):
    assert main(["run", "--scenario", "nominal_only", "--duration-ms", "3000",
                 "--report-dir", str(tmp_path), "--no-fsync"]) == 0
    run_dir = tmp_path / "nominal_only-deterministic"
    original = (run_dir / "latency_summary.csv").read_bytes()
    (run_dir / "latency_summary.csv").unlink()
    assert main(["report", str(run_dir)]) == 0
    assert (run_dir / "latency_summary.csv").read_bytes() == original


def test_record_then_replay(tmp_path):
    record = tmp_path / "uc1.jsonl"
    assert main(["run", "--scenario", "uc1_c0012", "--duration-ms", "12000", "--record", str(record),
                 "--report-dir", str(tmp_path), "--no-fsync"]) == 0
    assert record.is_file()
    assert main(["replay", str(record), "--report-dir", str(tmp_path), "--no-fsync"]) == 0
    workload = pd.read_csv(tmp_path / "replay-uc1-deterministic" / "workload.csv")
    assert workload.iloc[0]["Losses"] == 0
    assert main(["replay", str(tmp_path / "missing.jsonl"), "--report-dir", str(tmp_path)]) == 2


def test_bench_smoke(tmp_path):
    assert main(["bench", "--profile", "smoke", "--duration-ms", "5000",
                 "--report-dir", str(tmp_path), "--no-fsync"]) == 0
    workload = pd.read_csv(tmp_path / "bench-smoke" / "workload.csv")
    assert list(workload["Profile"]) == ["smoke"] * 3
    assert workload["Passed"].all()
    assert main(["bench", "--repeat", "0", "--report-dir", str(tmp_path)]) == 2


def test_bad_config_file_exits_with_error(tmp_path, capsys):
    assert main(["run", "--scenario", "nominal_only", "--config", str(tmp_path / "nope.json")]) == 2
    assert "config file not found" in capsys.readouterr().out
