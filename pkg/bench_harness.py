"""
Bench Harness Module
====================
Workload profiles, the file-backed persistence sink, the latency probe
bookkeeping and the CSV/JSON report set (per-thing latency tables, aggregate
metric table, detection and improvement tables).
"""

import json
import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from device_sim import DeviceSpec, Environment, Fleet
from hybrid_pipeline import (
    Alert,
    CsfMap,
    DEFAULT_CSF_MAP,
    DetectionResult,
    EngineMode,
    HybridPipeline,
    detection_time,
    improvement,
)
from message_bus import Bus, replay
from metrics import LatencySample, StatSummary, calculate_coverage, summarize, throughput
from scenario_injector import GroundTruthEntry

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
SUMMARY_COLUMNS = ["N", "Mean", "Median", "P95", "P99", "Min", "Max", "Jitter"]


class PersistenceError(RuntimeError):
    pass


class GateError(RuntimeError):
    pass


# --- persistence sink ----------------------------------------------------------

class EventStore:
    """Append-only JSON-lines store with an in-memory offset index."""

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self.fsync = fsync
        self._fh = open(path, "a+b")
        self._index: Dict[str, Tuple[int, int]] = {}
        self._ids = 0
        self._lock = threading.Lock()
        self.closed = False
        self.successes = 0
        self.failures = 0
        self.timings: Dict[str, List[float]] = defaultdict(list)
        self.insert_by_channel: Dict[str, List[float]] = defaultdict(list)

    def __enter__(self) -> "EventStore":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def __len__(self) -> int:
        return len(self._index)

    @property
    def success_ratio(self) -> float:
        attempts = self.successes + self.failures
        return self.successes / attempts if attempts else 1.0

    def close(self) -> None:
        with self._lock:
            if not self.closed:
                self._fh.close()
                self.closed = True

    def _append(self, record: Dict[str, Any]) -> Tuple[int, int]:
        if self.closed:
            raise PersistenceError(f"event store '{self.path}' is closed")
        data = (json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
        try:
            self._fh.seek(0, os.SEEK_END)
            offset = self._fh.tell()
            self._fh.write(data)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as e:
            raise PersistenceError(f"write to '{self.path}' failed: {e}") from e
        return offset, len(data)

    def persist(self, event: Mapping[str, Any]) -> float:
        started = time.perf_counter()
        with self._lock:
            try:
                self._ids += 1
                event_id = str(event.get("id") or self._ids)
                record = dict(event, id=event_id)
                self._index[event_id] = self._append(record)
            except PersistenceError:
                self.failures += 1
                raise
            self.successes += 1
        elapsed = (time.perf_counter() - started) * 1000.0
        self.timings["insert"].append(elapsed)
        topic = str(event.get("topic", ""))
        self.insert_by_channel[topic.split("/", 1)[0] or "unknown"].append(elapsed)
        return elapsed

    def _load(self, event_id: str) -> Dict[str, Any]:
        if self.closed:
            raise PersistenceError(f"event store '{self.path}' is closed")
        if event_id not in self._index:
            raise KeyError(event_id)
        offset, length = self._index[event_id]
        self._fh.seek(offset)
        return json.loads(self._fh.read(length))

    def read(self, event_id: str) -> Dict[str, Any]:
        started = time.perf_counter()
        with self._lock:
            record = self._load(event_id)
        self.timings["read"].append((time.perf_counter() - started) * 1000.0)
        return record

    def update(self, event_id: str, changes: Mapping[str, Any]) -> float:
        started = time.perf_counter()
        with self._lock:
            current = self._load(event_id)
            current.update(changes)
            self._index[event_id] = self._append(current)
        elapsed = (time.perf_counter() - started) * 1000.0
        self.timings["update"].append(elapsed)
        return elapsed

    def delete(self, event_id: str) -> float:
        started = time.perf_counter()
        with self._lock:
            if event_id not in self._index:
                raise KeyError(event_id)
            self._append({"id": event_id, "deleted": True})
            del self._index[event_id]
        elapsed = (time.perf_counter() - started) * 1000.0
        self.timings["delete"].append(elapsed)
        return elapsed

    def ids(self) -> List[str]:
        return list(self._index)


def persist(sink: EventStore, event: Mapping[str, Any]) -> float:
    return sink.persist(event)


def crud_cycle(sink: EventStore, count: int = 100) -> Dict[str, List[float]]:
    """Insert, read, update and delete `count` synthetic events and return the timings."""
    ids = []
    for i in range(count):
        sink.persist({"id": f"crud-{i}", "topic": "live/crud/state", "seq": i})
        ids.append(f"crud-{i}")
    for event_id in ids:
        sink.read(event_id)
    for event_id in ids:
        sink.update(event_id, {"updated": True})
    for event_id in ids:
        sink.delete(event_id)
    return {op: list(values) for op, values in sink.timings.items()}


# --- workloads -----------------------------------------------------------------

class ProfileKind(str, Enum):
    SMOKE = "smoke"
    BASELINE = "baseline"
    SWEEP = "sweep"


@dataclass(frozen=True)
class WorkloadProfile:
    kind: ProfileKind
    virtual_users: Union[int, Tuple[int, ...]]
    duration_s: float
    publish_rate_per_vu: float = 1.0
    success_floor: float = 0.999

    def __post_init__(self) -> None:
        steps = self.steps
        if not steps or any(v < 1 for v in steps):
            raise ValueError(f"virtual users must be >= 1, got {self.virtual_users}")
        if self.duration_s < 0:
            raise ValueError(f"duration_s must be >= 0, got {self.duration_s}")
        if self.publish_rate_per_vu <= 0:
            raise ValueError("publish_rate_per_vu must be > 0")
        if not 0.0 < self.success_floor <= 1.0:
            raise ValueError(f"success_floor must be in (0, 1], got {self.success_floor}")
        if self.kind is ProfileKind.SMOKE:
            if max(steps) > 5:
                raise ValueError("smoke profile allows 1-5 virtual users")
            if self.duration_s and not 60 <= self.duration_s <= 180:
                logger.warning("smoke duration %.0f s is outside the 60-180 s window", self.duration_s)

    @property
    def steps(self) -> Tuple[int, ...]:
        if isinstance(self.virtual_users, int):
            return (self.virtual_users,)
        return tuple(self.virtual_users)

    @classmethod
    def named(cls, name: str, duration_s: Optional[float] = None) -> "WorkloadProfile":
        kind = ProfileKind(name)
        if kind is ProfileKind.SMOKE:
            return cls(kind, 2, 60.0 if duration_s is None else duration_s)
        if kind is ProfileKind.BASELINE:
            return cls(kind, 5, 120.0 if duration_s is None else duration_s, 2.0)
        return cls(kind, (1, 2, 4, 6, 8, 10), 120.0 if duration_s is None else duration_s, 2.0)


@dataclass(frozen=True)
class StepResult:
    virtual_users: int
    published: int
    processed: int
    elapsed_s: float

    @property
    def offered(self) -> float:
        return throughput(self.published, self.elapsed_s)

    @property
    def achieved(self) -> float:
        return throughput(self.processed, self.elapsed_s)


@dataclass
class RunResult:
    profile: WorkloadProfile
    samples: List[LatencySample]
    published: int
    processed: int
    elapsed_s: float
    success_ratio: float
    steps: List[StepResult] = field(default_factory=list)

    @property
    def losses(self) -> int:
        return self.published - self.processed

    @property
    def throughput(self) -> float:
        return throughput(self.processed, self.elapsed_s)

    @property
    def passed(self) -> bool:
        return self.losses == 0 and self.success_ratio >= self.profile.success_floor

    def to_dict(self) -> Dict[str, Any]:
        return {
            "profile": self.profile.kind.value,
            "published": self.published,
            "processed": self.processed,
            "losses": self.losses,
            "throughput": self.throughput,
            "success_ratio": self.success_ratio,
            "passed": self.passed,
            "steps": [
                {"vus": s.virtual_users, "published": s.published, "processed": s.processed,
                 "offered": s.offered, "achieved": s.achieved} for s in self.steps
            ],
        }


class _VirtualUser(threading.Thread):
    def __init__(self, bus: Bus, spec: DeviceSpec, count: int, interval_ms: int,
                 seed: int, start_ms: int, speed: float):
        super().__init__(daemon=True)
        self.bus = bus
        self.fleet = Fleet([spec], seed=seed, start_ms=start_ms, publisher_id=f"vu-{spec.thing_id}")
        self.env = Environment(seed=seed)
        self.spec = spec
        self.count = count
        self.interval_ms = interval_ms
        self.start_ms = start_ms
        self.speed = speed
        self.published = 0

    def run(self) -> None:
        started = time.monotonic()
        for i in range(self.count):
            ts = self.start_ms + i * self.interval_ms
            if self.speed > 0:
                delay = (i * self.interval_ms) / 1000.0 / self.speed - (time.monotonic() - started)
                if delay > 0:
                    time.sleep(delay)
            self.bus.publish(self.fleet.envelope_for(self.spec.thing_id, self.env, ts))
            self.published += 1


def _drive(pipeline: HybridPipeline, bus: Bus, producers: Sequence[threading.Thread]) -> int:
    """Single consumer: feed the pipeline until every producer is done and the queue is empty."""
    sub = bus.subscribe("#")
    before = pipeline.processed
    for producer in producers:
        producer.start()
    while any(p.is_alive() for p in producers):
        delivery = sub.get(timeout=0.05)
        if delivery is not None:
            pipeline.process(delivery.envelope, delivery.published_ns)
    for producer in producers:
        producer.join()
    pipeline.pump(sub)
    sub.cancel()
    return pipeline.processed - before


def run_workload(profile: WorkloadProfile, pipeline: HybridPipeline, specs: Sequence[DeviceSpec],
                 seed: int = 7, speed: float = 0.0) -> RunResult:
    interval_ms = max(1, int(round(1000.0 / profile.publish_rate_per_vu)))
    per_vu = int(profile.duration_s * profile.publish_rate_per_vu)
    if profile.kind is ProfileKind.SWEEP:
        per_vu = int(per_vu / len(profile.steps))
    first_sample = len(pipeline.samples)
    failures_before = pipeline.persist_failures
    processed_before = pipeline.processed
    published = 0
    steps: List[StepResult] = []
    started = time.monotonic()
    start_ms = pipeline.now_ms + interval_ms
    for step_index, vus in enumerate(profile.steps):
        bus = Bus()
        users = [
            _VirtualUser(bus, specs[i % len(specs)], per_vu, interval_ms, seed + step_index * 100 + i, start_ms, speed)
            for i in range(vus)
        ]
        step_started = time.monotonic()
        processed = _drive(pipeline, bus, users)
        step_published = sum(u.published for u in users)
        published += step_published
        steps.append(StepResult(vus, step_published, processed, time.monotonic() - step_started))
        start_ms += per_vu * interval_ms
    processed_total = pipeline.processed - processed_before
    failed = pipeline.persist_failures - failures_before
    ratio = (processed_total - failed) / processed_total if processed_total else 1.0
    result = RunResult(profile, pipeline.samples[first_sample:], published, processed_total,
                       time.monotonic() - started, ratio, steps)
    logger.info("%s workload: %d published, %d processed, success %.4f, %s",
                profile.kind.value, published, processed_total, ratio, "pass" if result.passed else "FAIL")
    return result


def run_replay(source_path: str, pipeline: HybridPipeline, speed: float = 0.0) -> RunResult:
    bus = Bus()
    counter: Dict[str, int] = {}

    def produce() -> None:
        counter["published"] = replay(bus, source_path, speed)

    first_sample = len(pipeline.samples)
    failures_before = pipeline.persist_failures
    started = time.monotonic()
    processed = _drive(pipeline, bus, [threading.Thread(target=produce, daemon=True)])
    failed = pipeline.persist_failures - failures_before
    ratio = (processed - failed) / processed if processed else 1.0
    profile = WorkloadProfile(ProfileKind.BASELINE, 1, 0.0)
    return RunResult(profile, pipeline.samples[first_sample:], counter.get("published", 0), processed,
                     time.monotonic() - started, ratio)


class Harness:
    """Session gate: formal profiles run only after a passing smoke run."""

    def __init__(self, specs: Sequence[DeviceSpec], seed: int = 7, speed: float = 0.0):
        self.specs = list(specs)
        self.seed = seed
        self.speed = speed
        self.smoke_passed = False
        self.results: List[RunResult] = []

    def run(self, profile: WorkloadProfile, pipeline: HybridPipeline) -> RunResult:
        if profile.kind is not ProfileKind.SMOKE and not self.smoke_passed:
            raise GateError(f"{profile.kind.value} profile requires a passing smoke run first")
        result = run_workload(profile, pipeline, self.specs, self.seed, self.speed)
        if profile.kind is ProfileKind.SMOKE:
            self.smoke_passed = result.passed
        self.results.append(result)
        return result


# --- reports -------------------------------------------------------------------

@dataclass
class EngineRun:
    engine: EngineMode
    alerts: List[Alert]
    band_counts: Dict[str, int] = field(default_factory=dict)


@dataclass
class RunReport:
    name: str
    samples: List[LatencySample] = field(default_factory=list)
    ground_truth: List[GroundTruthEntry] = field(default_factory=list)
    engines: List[EngineRun] = field(default_factory=list)
    crud: Dict[str, List[float]] = field(default_factory=dict)
    insert_by_channel: Dict[str, List[float]] = field(default_factory=dict)
    workloads: List[Dict[str, Any]] = field(default_factory=list)
    csf_map: CsfMap = DEFAULT_CSF_MAP
    meta: Dict[str, Any] = field(default_factory=dict)

    def detections(self) -> List[Tuple[EngineMode, DetectionResult]]:
        return [(run.engine, detection_time(self.ground_truth, run.alerts, run.engine)) for run in self.engines]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "meta": self.meta,
            "samples": [s.to_dict() for s in self.samples],
            "ground_truth": [g.to_dict() for g in self.ground_truth],
            "engines": [
                {"engine": r.engine.value, "alerts": [a.to_dict() for a in r.alerts], "band_counts": r.band_counts}
                for r in self.engines
            ],
            "crud": self.crud,
            "insert_by_channel": self.insert_by_channel,
            "workloads": self.workloads,
            "csf": {
                **dict(self.csf_map.by_origin),
                "overrides": dict(self.csf_map.overrides),
                "descriptions": dict(self.csf_map.descriptions),
            },
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunReport":
        return cls(
            name=raw["name"],
            samples=[LatencySample.from_dict(s) for s in raw.get("samples", [])],
            ground_truth=[GroundTruthEntry.from_dict(g) for g in raw.get("ground_truth", [])],
            engines=[
                EngineRun(EngineMode(e["engine"]), [Alert.from_dict(a) for a in e["alerts"]], dict(e.get("band_counts", {})))
                for e in raw.get("engines", [])
            ],
            crud={k: list(v) for k, v in raw.get("crud", {}).items()},
            insert_by_channel={k: list(v) for k, v in raw.get("insert_by_channel", {}).items()},
            workloads=list(raw.get("workloads", [])),
            csf_map=CsfMap.from_dict(raw["csf"]) if "csf" in raw else DEFAULT_CSF_MAP,
            meta=dict(raw.get("meta", {})),
        )


def _summary_row(values: Sequence[float]) -> Dict[str, Any]:
    return summarize(values).rounded()


def latency_table(samples: Sequence[LatencySample], channel: str) -> pd.DataFrame:
    by_thing: Dict[str, List[float]] = defaultdict(list)
    for s in samples:
        if s.channel == channel:
            by_thing[s.thing_id].append(s.deltas.d_end)
    rows = [{"thingId": thing, **_summary_row(by_thing[thing])} for thing in sorted(by_thing)]
    return pd.DataFrame(rows, columns=["thingId"] + SUMMARY_COLUMNS)


def aggregate_table(report: RunReport) -> pd.DataFrame:
    uc = report.meta.get("uc", report.name)
    rows = []
    for channel in ("live", "twin"):
        chosen = [s for s in report.samples if s.channel == channel]
        series = {
            "lat_end_ms": [s.deltas.d_end for s in chosen],
            "lat_rules_db_ms": [s.deltas.d_rules_db for s in chosen],
            "insert_ms": report.insert_by_channel.get(channel, []),
        }
        for metric, values in series.items():
            if not values:
                continue
            stats: StatSummary = summarize(values)
            rows.append({
                "Metric": metric, "UC": uc, "Channel": channel, "Count": stats.n,
                "Mean": round(stats.mean, 2), "Median": round(stats.median, 2), "P95": round(stats.p95, 2),
                "P99": round(stats.p99, 2), "Min": round(stats.min, 2), "Max": round(stats.max, 2),
            })
    columns = ["Metric", "UC", "Channel", "Count", "Mean", "Median", "P95", "P99", "Min", "Max"]
    return pd.DataFrame(rows, columns=columns)


DETECTION_COLUMNS = ["Engine", "Campaign", "TTP", "Thing", "Detection Time (ms)", "CSF Tag",
                     "CSF Description", "Injected At (ms)", "Status", "Duplicates"]


def detection_table(report: RunReport) -> pd.DataFrame:
    rows = []
    for engine, result in report.detections():
        for rec in result.records:
            rows.append({
                "Engine": engine.value,
                "Campaign": rec.campaign,
                "TTP": rec.ttp,
                "Thing": rec.thing_id,
                "Detection Time (ms)": "--" if rec.detection_time_ms is None else f"{rec.detection_time_ms:.2f}",
                "CSF Tag": rec.csf_tag or "",
                "CSF Description": report.csf_map.describe(rec.csf_tag),
                "Injected At (ms)": rec.injection_ts_ms,
                "Status": rec.status.value,
                "Duplicates": rec.duplicates,
            })
    return pd.DataFrame(rows, columns=DETECTION_COLUMNS)


IMPROVEMENT_COLUMNS = ["Campaign", "TTP", "Thing", "Baseline", "Baseline (ms)", "Candidate", "Candidate (ms)",
                       "Improvement (%)"]


def _fmt(value: Optional[float]) -> str:
    return "--" if value is None else f"{value:.2f}"


def improvement_table(report: RunReport) -> pd.DataFrame:
    """Pair the first engine run (baseline) with the second (candidate), per injection and per campaign."""
    detections = report.detections()
    if len(detections) < 2:
        return pd.DataFrame([], columns=IMPROVEMENT_COLUMNS)
    (base_engine, base), (cand_engine, cand) = detections[0], detections[1]
    names = {"Baseline": base_engine.value, "Candidate": cand_engine.value}

    rows = []
    per_campaign: Dict[str, List[Tuple[float, float]]] = defaultdict(list)
    for b, c in zip(base.records, cand.records):
        bt, ct = b.detection_time_ms, c.detection_time_ms
        pct = improvement(bt, ct) if bt is not None and ct is not None and bt > 0 else None
        if bt is not None and ct is not None:
            per_campaign[b.campaign].append((bt, ct))
        rows.append({"Campaign": b.campaign, "TTP": b.ttp, "Thing": b.thing_id, **names,
                     "Baseline (ms)": _fmt(bt), "Candidate (ms)": _fmt(ct), "Improvement (%)": _fmt(pct)})
    for campaign in sorted(per_campaign):
        pairs = per_campaign[campaign]
        mean_b = sum(p[0] for p in pairs) / len(pairs)
        mean_c = sum(p[1] for p in pairs) / len(pairs)
        pct = improvement(mean_b, mean_c) if mean_b > 0 else None
        rows.append({"Campaign": campaign, "TTP": "ALL", "Thing": "", **names,
                     "Baseline (ms)": _fmt(mean_b), "Candidate (ms)": _fmt(mean_c), "Improvement (%)": _fmt(pct)})
    return pd.DataFrame(rows, columns=IMPROVEMENT_COLUMNS)


def alert_volume_table(report: RunReport) -> pd.DataFrame:
    counts: Dict[Tuple[str, str, str], int] = defaultdict(int)
    for run in report.engines:
        for alert in run.alerts:
            counts[(run.engine.value, alert.origin.value, alert.ttp)] += 1
    rows = [{"Engine": e, "Origin": o, "TTP": t, "Alerts": n} for (e, o, t), n in sorted(counts.items())]
    return pd.DataFrame(rows, columns=["Engine", "Origin", "TTP", "Alerts"])


def band_table(report: RunReport) -> pd.DataFrame:
    rows = []
    for run in report.engines:
        for name in ("low", "med", "high"):
            if run.band_counts:
                rows.append({"Engine": run.engine.value, "Band": name, "Count": int(run.band_counts.get(name, 0))})
    return pd.DataFrame(rows, columns=["Engine", "Band", "Count"])


def coverage_table(report: RunReport) -> pd.DataFrame:
    rows = []
    for engine, result in report.detections():
        row = {"Engine": engine.value, **calculate_coverage(result.executed, result.detected)}
        row["False Positives"] = len(result.false_positives)
        rows.append(row)
    return pd.DataFrame(rows, columns=["Engine", "Injections", "Detected", "Detection Coverage (%)", "False Positives"])


def crud_table(report: RunReport) -> pd.DataFrame:
    rows = [{"Operation": op, **_summary_row(values)} for op, values in sorted(report.crud.items()) if values]
    return pd.DataFrame(rows, columns=["Operation"] + SUMMARY_COLUMNS)


def workload_table(report: RunReport) -> pd.DataFrame:
    rows = []
    for index, w in enumerate(report.workloads):
        rows.append({
            "Run": index + 1, "Profile": w["profile"], "Published": w["published"], "Processed": w["processed"],
            "Losses": w["losses"], "Throughput (msg/s)": round(w["throughput"], 2),
            "Success Ratio": round(w["success_ratio"], 4), "Passed": w["passed"],
        })
    columns = ["Run", "Profile", "Published", "Processed", "Losses", "Throughput (msg/s)", "Success Ratio", "Passed"]
    return pd.DataFrame(rows, columns=columns)


def save_run(report: RunReport, run_dir: str) -> str:
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, RUN_FILE)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True)
    return path


def load_run(run_dir: str) -> RunReport:
    path = os.path.join(run_dir, RUN_FILE)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no {RUN_FILE} in '{run_dir}'")
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def render(report: RunReport, run_dir: str) -> List[str]:
    """Write every CSV table for a run; a pure function of the stored run data."""
    os.makedirs(run_dir, exist_ok=True)
    tables = {
        "latency_live.csv": latency_table(report.samples, "live"),
        "latency_twin.csv": latency_table(report.samples, "twin"),
        "latency_summary.csv": aggregate_table(report),
        "detection.csv": detection_table(report),
        "improvement.csv": improvement_table(report),
        "alert_volume.csv": alert_volume_table(report),
        "risk_bands.csv": band_table(report),
        "coverage.csv": coverage_table(report),
        "crud.csv": crud_table(report),
        "workload.csv": workload_table(report),
    }
    written = []
    for name, frame in tables.items():
        path = os.path.join(run_dir, name)
        frame.to_csv(path, index=False, lineterminator="\n")
        written.append(path)
    with open(os.path.join(run_dir, "alerts.jsonl"), "w", encoding="utf-8") as fh:
        for run in report.engines:
            for alert in run.alerts:
                fh.write(alert.to_line() + "\n")
    written.append(os.path.join(run_dir, "alerts.jsonl"))
    return written


def report(run: RunReport, run_dir: str) -> List[str]:
    save_run(run, run_dir)
    return render(load_run(run_dir), run_dir)
