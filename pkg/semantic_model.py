"""
Semantic Model Module
=====================
Lifts raw device observations into typed facts, keeps the current fact base
and extracts the normalized feature vector consumed by the fuzzy engine.
"""

import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, TypedDict, Union

logger = logging.getLogger(__name__)

# Type aliases for clarity
Scalar = Union[bool, int, float, str]
FeatureMap = Dict[str, Scalar]
FactKey = Tuple[str, str]

_SEGMENT = re.compile(r"^[a-z0-9_]+$")
_fallback_ids = itertools.count(1)

SAREF_TYPES = ("Device", "Sensor", "Actuator", "LightingDevice")


class ObservationError(ValueError):
    pass


class FeatureExtractionError(ValueError):
    pass


class FactKind(str, Enum):
    STATIC_ATTRIBUTE = "static_attribute"
    DYNAMIC_PROPERTY = "dynamic_property"


class DeltaStatus(str, Enum):
    INSERTED = "inserted"
    REPLACED = "replaced"
    IGNORED_STALE = "ignored_stale"


def is_scalar(value: Any) -> bool:
    return isinstance(value, (bool, int, float, str))


def valid_path(path: str) -> bool:
    if not path:
        return False
    return all(_SEGMENT.match(segment) for segment in path.split("."))


def flatten_features(nested: Mapping[str, Any], prefix: str = "") -> FeatureMap:
    """Flatten nested feature objects into dotted predicates (`state.on`)."""
    flat: FeatureMap = {}
    for key, value in nested.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            flat.update(flatten_features(value, path))
        elif is_scalar(value):
            flat[path] = value
        else:
            raise ObservationError(f"non-scalar value at feature path '{path}'")
    return flat


def unflatten_features(flat: Mapping[str, Scalar]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for path in sorted(flat):
        node = nested
        parts = path.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                # a scalar already lives at this prefix; keep the dotted key instead
                node = None
                break
            node = child
        if node is None:
            nested[path] = flat[path]
        else:
            node[parts[-1]] = flat[path]
    return nested


@dataclass(frozen=True)
class DeviceObservation:
    thing_id: str
    attributes: FeatureMap
    features: FeatureMap
    ts_ms: int

    def validate(self) -> None:
        if not self.thing_id:
            raise ObservationError("thing_id must be non-empty")
        if self.ts_ms < 0:
            raise ObservationError(f"ts_ms must be >= 0, got {self.ts_ms}")
        for path, value in self.features.items():
            if not valid_path(path):
                raise ObservationError(f"malformed feature path '{path}'")
            if not is_scalar(value):
                raise ObservationError(f"non-scalar value at feature path '{path}'")
        for name, value in self.attributes.items():
            if not name or not is_scalar(value):
                raise ObservationError(f"invalid attribute '{name}'")


@dataclass(frozen=True)
class SemanticFact:
    fact_id: int
    thing_id: str
    predicate: str
    value: Scalar
    ts_ms: int
    kind: FactKind = FactKind.DYNAMIC_PROPERTY

    @property
    def key(self) -> FactKey:
        return (self.thing_id, self.predicate)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fact_id": self.fact_id,
            "thing_id": self.thing_id,
            "predicate": self.predicate,
            "value": self.value,
            "ts_ms": self.ts_ms,
            "kind": self.kind.value,
        }


@dataclass(frozen=True)
class FactDelta:
    status: DeltaStatus
    fact: SemanticFact
    old: Optional[SemanticFact] = None

    @property
    def value_changed(self) -> bool:
        if self.status is DeltaStatus.INSERTED:
            return True
        if self.status is DeltaStatus.REPLACED and self.old is not None:
            return not same_value(self.old.value, self.fact.value)
        return False


def same_value(a: Scalar, b: Scalar) -> bool:
    """Typed equality: booleans never equal numbers."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, str) or isinstance(b, str):
        return isinstance(a, str) and isinstance(b, str) and a == b
    return a == b


class FactBase:
    """Current fact per (thing_id, predicate), last writer by ts_ms wins."""

    def __init__(self) -> None:
        self._facts: Dict[FactKey, SemanticFact] = {}
        self.generation = 0
        self._ids = itertools.count(1)

    def next_id(self) -> int:
        return next(self._ids)

    @property
    def id_source(self) -> Iterator[int]:
        return self._ids

    def __len__(self) -> int:
        return len(self._facts)

    def __iter__(self) -> Iterator[SemanticFact]:
        return iter(self._facts.values())

    def get(self, thing_id: str, predicate: str) -> Optional[SemanticFact]:
        return self._facts.get((thing_id, predicate))

    def assert_fact(self, fact: SemanticFact) -> FactDelta:
        current = self._facts.get(fact.key)
        if current is None:
            self._facts[fact.key] = fact
            self.generation += 1
            return FactDelta(DeltaStatus.INSERTED, fact)
        # equal ts: the later assert wins
        if fact.ts_ms < current.ts_ms:
            return FactDelta(DeltaStatus.IGNORED_STALE, fact, current)
        self._facts[fact.key] = fact
        self.generation += 1
        return FactDelta(DeltaStatus.REPLACED, fact, current)

    def retract(self, thing_id: str, predicate: str) -> Optional[SemanticFact]:
        removed = self._facts.pop((thing_id, predicate), None)
        if removed is not None:
            self.generation += 1
        return removed

    def query(self, thing_id: Optional[str] = None, predicate: Optional[str] = None) -> List[SemanticFact]:
        matched = [
            f for f in self._facts.values()
            if (thing_id is None or f.thing_id == thing_id)
            and (predicate is None or f.predicate == predicate)
        ]
        return sorted(matched, key=lambda f: f.key)

    def things(self) -> List[str]:
        return sorted({thing for thing, _ in self._facts})

    def snapshot(self) -> Tuple[SemanticFact, ...]:
        return tuple(self.query())


def lift(obs: DeviceObservation, id_source: Optional[Iterator[int]] = None) -> List[SemanticFact]:
    """Semantic lifting: one fact per attribute and one per feature."""
    obs.validate()
    ids = id_source if id_source is not None else _fallback_ids
    facts: List[SemanticFact] = []
    for name, value in obs.attributes.items():
        facts.append(SemanticFact(next(ids), obs.thing_id, name, value, obs.ts_ms, FactKind.STATIC_ATTRIBUTE))
    for path, value in obs.features.items():
        facts.append(SemanticFact(next(ids), obs.thing_id, path, value, obs.ts_ms, FactKind.DYNAMIC_PROPERTY))
    return facts


def assert_fact(fb: FactBase, fact: SemanticFact) -> FactDelta:
    return fb.assert_fact(fact)


def query(fb: FactBase, thing_id: Optional[str] = None, predicate: Optional[str] = None) -> List[SemanticFact]:
    return fb.query(thing_id, predicate)


# --- feature extraction ------------------------------------------------------

class FeatureEntryDict(TypedDict):
    predicate: str
    lo: float
    hi: float
    default: float


@dataclass(frozen=True)
class FeatureEntry:
    predicate: str
    lo: float
    hi: float
    default: float

    def normalize(self, value: float) -> float:
        scaled = (value - self.lo) / (self.hi - self.lo)
        return min(1.0, max(0.0, scaled))


@dataclass(frozen=True)
class FeatureSpec:
    entries: Tuple[FeatureEntry, ...]

    def __post_init__(self) -> None:
        for entry in self.entries:
            if not entry.lo < entry.hi:
                raise FeatureExtractionError(f"feature '{entry.predicate}': lo must be < hi")
            if not entry.lo <= entry.default <= entry.hi:
                raise FeatureExtractionError(f"feature '{entry.predicate}': default outside [lo, hi]")

    @property
    def dimension(self) -> int:
        return len(self.entries)

    @property
    def predicates(self) -> List[str]:
        return [entry.predicate for entry in self.entries]

    @classmethod
    def from_list(cls, raw: Iterable[FeatureEntryDict]) -> "FeatureSpec":
        return cls(tuple(
            FeatureEntry(e["predicate"], float(e["lo"]), float(e["hi"]), float(e["default"])) for e in raw
        ))


# shipped defaults: traffic (0, 1000) pps, brightness (0, 254), lux (0, 1000), temperature (-10, 50)
DEFAULT_FEATURE_SPEC = FeatureSpec((
    FeatureEntry("network.traffic_rate", 0.0, 1000.0, 0.0),
    FeatureEntry("state.bri", 0.0, 254.0, 0.0),
    FeatureEntry("state.lux", 0.0, 1000.0, 0.0),
    FeatureEntry("state.temperature", -10.0, 50.0, 20.0),
))


def load_feature_spec(path: str) -> FeatureSpec:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    entries = raw["entries"] if isinstance(raw, dict) else raw
    return FeatureSpec.from_list(entries)


@dataclass(frozen=True)
class FeatureVector:
    values: Tuple[float, ...]
    ts_ms: int = 0
    predicates: Tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.values)


def _numeric(fact: SemanticFact) -> float:
    value = fact.value
    if isinstance(value, bool):
        return 1.0 if value else 0.0
    if isinstance(value, (int, float)):
        return float(value)
    raise FeatureExtractionError(f"predicate '{fact.predicate}' holds a string value {value!r}, expected a number")


def feature_vector(fb: FactBase, spec: FeatureSpec, thing_id: Optional[str] = None) -> FeatureVector:
    values: List[float] = []
    latest = 0
    for entry in spec.entries:
        if thing_id is not None:
            fact = fb.get(thing_id, entry.predicate)
        else:
            candidates = fb.query(predicate=entry.predicate)
            fact = max(candidates, key=lambda f: f.ts_ms) if candidates else None
        if fact is None:
            values.append(entry.normalize(entry.default))
            continue
        values.append(entry.normalize(_numeric(fact)))
        latest = max(latest, fact.ts_ms)
    return FeatureVector(tuple(values), latest, tuple(spec.predicates))
