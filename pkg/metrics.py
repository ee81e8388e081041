import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

NS_PER_MS = 1_000_000


@dataclass(frozen=True)
class StageDeltas:
    d_ingest_ns: int
    d_rules_db_ns: int

    @property
    def d_end_ns(self) -> int:
        return self.d_ingest_ns + self.d_rules_db_ns

    @property
    def d_ingest(self) -> float:
        return self.d_ingest_ns / NS_PER_MS

    @property
    def d_rules_db(self) -> float:
        return self.d_rules_db_ns / NS_PER_MS

    @property
    def d_end(self) -> float:
        return self.d_end_ns / NS_PER_MS


@dataclass(frozen=True)
class LatencySample:
    """Three stage instants on one monotonic clock, integer nanoseconds."""

    topic: str
    channel: str
    thing_id: str
    t_src_ns: int
    t_rules_ns: int
    t_db_ns: int
    persisted: bool = True

    @property
    def deltas(self) -> StageDeltas:
        return StageDeltas(self.t_rules_ns - self.t_src_ns, self.t_db_ns - self.t_rules_ns)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "topic": self.topic,
            "channel": self.channel,
            "thing_id": self.thing_id,
            "t_src_ns": self.t_src_ns,
            "t_rules_ns": self.t_rules_ns,
            "t_db_ns": self.t_db_ns,
            "persisted": self.persisted,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "LatencySample":
        return cls(raw["topic"], raw["channel"], raw["thing_id"], int(raw["t_src_ns"]),
                   int(raw["t_rules_ns"]), int(raw["t_db_ns"]), bool(raw.get("persisted", True)))


@dataclass(frozen=True)
class StatSummary:
    n: int
    mean: float
    median: float
    p95: float
    p99: float
    min: float
    max: float
    jitter: Optional[float]

    def rounded(self) -> Dict[str, Any]:
        return {
            "N": self.n,
            "Mean": round(self.mean, 2),
            "Median": round(self.median, 2),
            "P95": round(self.p95, 2),
            "P99": round(self.p99, 2),
            "Min": round(self.min, 2),
            "Max": round(self.max, 2),
            "Jitter": "--" if self.jitter is None else round(self.jitter, 2),
        }


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    n = len(sorted_values)
    # round before ceil so 0.95 * 20 stays 19 rather than 19.000000000000004
    rank = max(1, math.ceil(round(q * n, 9)))
    return float(sorted_values[min(rank, n) - 1])


def summarize(samples: Iterable[float]) -> StatSummary:
    data = np.asarray(list(samples), dtype=float)
    if data.size == 0:
        raise ValueError("cannot summarize an empty sample list")
    ordered = np.sort(data)
    return StatSummary(
        n=int(data.size),
        mean=float(np.mean(data)),
        median=nearest_rank(ordered, 0.5),
        p95=nearest_rank(ordered, 0.95),
        p99=nearest_rank(ordered, 0.99),
        min=float(ordered[0]),
        max=float(ordered[-1]),
        jitter=float(np.std(data, ddof=1)) if data.size > 1 else None,
    )


def calculate_coverage(ground_truth_total: int, detected: int) -> Dict[str, Any]:
    coverage = (detected / ground_truth_total * 100.0) if ground_truth_total > 0 else 100.0
    return {
        "Injections": ground_truth_total,
        "Detected": detected,
        "Detection Coverage (%)": round(float(coverage), 2),
    }


def throughput(count: int, elapsed_s: float) -> float:
    return count / elapsed_s if elapsed_s > 0 else 0.0


def delta_series(samples: Sequence[LatencySample], stage: str) -> List[float]:
    return [getattr(s.deltas, stage) for s in samples]
