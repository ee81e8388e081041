"""
Twin Core Module
================
Digital-twin registry: per-thing live (active) and twin (passive) feature views,
divergence checks between them, and the passive mirror that keeps the twin
channel in step with the live one.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from message_bus import Channel, Envelope, Payload, Publisher, Topic
from semantic_model import FeatureMap, Scalar, same_value, unflatten_features

logger = logging.getLogger(__name__)

DEFAULT_GRACE_MS = 1000
DEFAULT_FRESHNESS_MS = 30_000


@dataclass(frozen=True)
class FeatureState:
    value: Scalar
    ts_ms: int
    since_ms: int


@dataclass
class ThingRecord:
    thing_id: str
    attributes: Dict[str, Scalar] = field(default_factory=dict)
    live_features: Dict[str, FeatureState] = field(default_factory=dict)
    twin_features: Dict[str, FeatureState] = field(default_factory=dict)
    last_live_ms: int = 0
    last_twin_ms: int = 0

    def features(self, channel: Channel) -> Dict[str, FeatureState]:
        return self.twin_features if channel is Channel.TWIN else self.live_features


@dataclass(frozen=True)
class ChangedPath:
    path: str
    old: Optional[Scalar]
    new: Scalar
    ts_ms: int


@dataclass(frozen=True)
class TwinDelta:
    thing_id: str
    channel: Channel
    changes: Tuple[ChangedPath, ...]

    @property
    def paths(self) -> Tuple[str, ...]:
        return tuple(c.path for c in self.changes)


@dataclass(frozen=True)
class Mismatch:
    thing_id: str
    path: str
    live_value: Scalar
    twin_value: Scalar
    age_ms: int
    detected_at_ms: int


class TwinRegistry:
    def __init__(self, grace_ms: int = DEFAULT_GRACE_MS, freshness_ms: int = DEFAULT_FRESHNESS_MS):
        self.grace_ms = grace_ms
        self.freshness_ms = freshness_ms
        self.records: Dict[str, ThingRecord] = {}

    def __contains__(self, thing_id: str) -> bool:
        return thing_id in self.records

    def get(self, thing_id: str) -> Optional[ThingRecord]:
        return self.records.get(thing_id)

    def apply_update(self, env: Envelope) -> Optional[TwinDelta]:
        channel = env.channel
        record = self.records.get(env.thing_id)
        if record is None:
            record = self.records[env.thing_id] = ThingRecord(env.thing_id)
        if channel is Channel.LIVE:
            record.attributes.update(env.payload.attributes)

        states = record.features(channel)
        changes = []
        for path, value in env.payload.features.items():
            current = states.get(path)
            if current is None:
                states[path] = FeatureState(value, env.ts_ms, env.ts_ms)
                changes.append(ChangedPath(path, None, value, env.ts_ms))
            elif env.ts_ms < current.ts_ms:
                continue
            elif same_value(current.value, value):
                states[path] = FeatureState(value, env.ts_ms, current.since_ms)
            else:
                states[path] = FeatureState(value, env.ts_ms, env.ts_ms)
                changes.append(ChangedPath(path, current.value, value, env.ts_ms))

        latest = max((s.ts_ms for s in states.values()), default=0)
        if channel is Channel.TWIN:
            record.last_twin_ms = latest
        else:
            record.last_live_ms = latest
        if not changes:
            return None
        return TwinDelta(env.thing_id, channel, tuple(changes))

    def divergence(self, thing_id: str, path: str, window_ms: Optional[int] = None,
                   now_ms: int = 0) -> Optional[Mismatch]:
        window = self.grace_ms if window_ms is None else window_ms
        if window <= 0:
            raise ValueError(f"window_ms must be > 0, got {window}")
        record = self.records.get(thing_id)
        if record is None:
            return None
        live = record.live_features.get(path)
        twin = record.twin_features.get(path)
        if live is None or twin is None or same_value(live.value, twin.value):
            return None
        if now_ms - record.last_live_ms > self.freshness_ms or now_ms - record.last_twin_ms > self.freshness_ms:
            return None
        age = now_ms - max(live.since_ms, twin.since_ms)
        if age < window:
            return None
        return Mismatch(thing_id, path, live.value, twin.value, age, now_ms)

    def snapshot(self, channel: Channel) -> Dict[str, FeatureMap]:
        channel = channel.canonical
        out: Dict[str, FeatureMap] = {}
        for thing_id in sorted(self.records):
            states = self.records[thing_id].features(channel)
            if states:
                out[thing_id] = {path: states[path].value for path in sorted(states)}
        return out

    def export_thing(self, thing_id: str) -> Dict[str, Any]:
        """Thing document with nested attributes and features, live view."""
        record = self.records.get(thing_id)
        if record is None:
            raise KeyError(thing_id)
        features = {path: state.value for path, state in record.live_features.items()}
        return {
            "thingId": thing_id,
            "attributes": dict(sorted(record.attributes.items())),
            "features": unflatten_features(features),
            "lastseen": record.last_live_ms,
        }


def apply_update(reg: TwinRegistry, env: Envelope) -> Optional[TwinDelta]:
    return reg.apply_update(env)


def divergence(reg: TwinRegistry, thing_id: str, path: str, window_ms: int, now_ms: int) -> Optional[Mismatch]:
    return reg.divergence(thing_id, path, window_ms, now_ms)


def snapshot(reg: TwinRegistry, channel: Channel) -> Dict[str, FeatureMap]:
    return reg.snapshot(channel)


class TwinMirror:
    """Passive synchronizer: forwards changed live features to the twin channel."""

    def __init__(self, publisher_id: str = "twin-mirror"):
        self.publisher = Publisher(publisher_id)
        self._forwarded: Dict[str, Dict[str, Scalar]] = {}

    def sync(self, env: Envelope) -> Optional[Envelope]:
        if env.channel is not Channel.LIVE:
            return None
        seen = self._forwarded.setdefault(env.thing_id, {})
        changed: FeatureMap = {}
        for path, value in env.payload.features.items():
            if path not in seen or not same_value(seen[path], value):
                changed[path] = value
                seen[path] = value
        if not changed:
            return None
        return self.publisher.envelope(
            Topic.twin(env.thing_id), Payload(dict(env.payload.attributes), changed), env.ts_ms)
