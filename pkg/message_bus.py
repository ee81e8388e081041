"""
Message Bus Module
==================
In-process publish/subscribe transport using MQTT topic conventions
(`live/<thingId>/state`, `twin/<thingId>`, `+`/`#` filters), with
line-delimited record/replay and an optional TCP ingest listener.
"""

import json
import logging
import queue
import socketserver
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, TypedDict

from paho.mqtt.matcher import MQTTMatcher

from semantic_model import DeviceObservation, FeatureMap

logger = logging.getLogger(__name__)

_RESERVED = ("/", "+", "#")


class BusError(RuntimeError):
    pass


class TopicError(ValueError):
    pass


class FilterError(ValueError):
    pass


class BusClosedError(BusError):
    pass


class ReplayError(BusError):
    pass


class Channel(str, Enum):
    CPS = "cps"
    LIVE = "live"
    TWIN = "twin"

    @property
    def canonical(self) -> "Channel":
        return Channel.LIVE if self is Channel.CPS else self


@dataclass(frozen=True)
class Topic:
    channel: Channel
    thing_id: str
    suffix: Optional[str] = None

    def __str__(self) -> str:
        base = f"{self.channel.value}/{self.thing_id}"
        return f"{base}/{self.suffix}" if self.suffix else base

    def canonical(self) -> "Topic":
        return Topic(self.channel.canonical, self.thing_id, self.suffix)

    @classmethod
    def live(cls, thing_id: str) -> "Topic":
        return cls(Channel.LIVE, thing_id, "state")

    @classmethod
    def twin(cls, thing_id: str) -> "Topic":
        return cls(Channel.TWIN, thing_id, "state")


def parse_topic(s: str) -> Topic:
    levels = s.split("/")
    if len(levels) not in (2, 3):
        raise TopicError(f"topic '{s}' must be <channel>/<thing_id>[/state]")
    prefix, thing_id = levels[0], levels[1]
    try:
        channel = Channel(prefix)
    except ValueError:
        raise TopicError(f"unknown channel prefix '{prefix}'") from None
    if not thing_id:
        raise TopicError(f"empty thing_id in topic '{s}'")
    if any(ch in thing_id for ch in _RESERVED):
        raise TopicError(f"reserved character in thing_id '{thing_id}'")
    suffix = levels[2] if len(levels) == 3 else None
    if suffix is not None and suffix != "state":
        raise TopicError(f"unknown topic suffix '{suffix}'")
    return Topic(channel, thing_id, suffix)


@dataclass(frozen=True)
class TopicFilter:
    pattern: str

    def __post_init__(self) -> None:
        if not self.pattern:
            raise FilterError("empty topic filter")
        levels = self.pattern.split("/")
        for index, level in enumerate(levels):
            if "#" in level and (level != "#" or index != len(levels) - 1):
                raise FilterError(f"'#' must be the final level in '{self.pattern}'")
            if "+" in level and level != "+":
                raise FilterError(f"'+' must occupy a whole level in '{self.pattern}'")

    def matches(self, topic: str) -> bool:
        return match_levels(self.pattern, topic)


def match_levels(pattern: str, topic: str) -> bool:
    """Level-by-level MQTT 3.1.1 matcher."""
    p = pattern.split("/")
    t = topic.split("/")
    if topic.startswith("$") and p[0] in ("+", "#"):
        return False
    for i, level in enumerate(p):
        if level == "#":
            return True
        if i >= len(t):
            return False
        if level != "+" and level != t[i]:
            return False
    return len(p) == len(t)


def match_indexed(pattern: str, topic: str) -> bool:
    matcher = MQTTMatcher()
    matcher[pattern] = True
    return next(iter(matcher.iter_match(topic)), None) is not None


# --- envelopes ---------------------------------------------------------------

class PayloadDict(TypedDict):
    attributes: Dict[str, Any]
    features: Dict[str, Any]


class RecordLine(TypedDict, total=False):
    topic: str
    seq: int
    ts_ms: int
    campaign: str
    payload: PayloadDict


@dataclass(frozen=True)
class Payload:
    attributes: FeatureMap = field(default_factory=dict)
    features: FeatureMap = field(default_factory=dict)

    def to_dict(self) -> PayloadDict:
        return {"attributes": dict(self.attributes), "features": dict(self.features)}


@dataclass(frozen=True)
class Envelope:
    topic: Topic
    thing_id: str
    seq: int
    ts_ms: int
    payload: Payload
    campaign_tag: Optional[str] = None

    def __post_init__(self) -> None:
        if self.thing_id != self.topic.thing_id:
            raise TopicError(f"envelope thing '{self.thing_id}' does not match topic '{self.topic}'")
        # cps is an alias of live; routing, records and stores only ever see live
        if self.topic.channel is not self.topic.channel.canonical:
            object.__setattr__(self, "topic", self.topic.canonical())

    @property
    def channel(self) -> Channel:
        return self.topic.channel.canonical

    def observation(self) -> DeviceObservation:
        return DeviceObservation(self.thing_id, dict(self.payload.attributes), dict(self.payload.features), self.ts_ms)

    def to_record(self) -> RecordLine:
        record: RecordLine = {"topic": str(self.topic), "seq": self.seq, "ts_ms": self.ts_ms,
                              "payload": self.payload.to_dict()}
        if self.campaign_tag:
            record["campaign"] = self.campaign_tag
        return record

    def to_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_record(cls, record: RecordLine) -> "Envelope":
        topic = parse_topic(record["topic"])
        payload = record.get("payload") or {"attributes": {}, "features": {}}
        if not isinstance(payload, dict):
            raise TypeError(f"payload must be an object, got {type(payload).__name__}")
        return cls(
            topic=topic,
            thing_id=topic.thing_id,
            seq=int(record["seq"]),
            ts_ms=int(record["ts_ms"]),
            payload=Payload(dict(payload.get("attributes", {})), dict(payload.get("features", {}))),
            campaign_tag=record.get("campaign"),
        )

    @classmethod
    def from_line(cls, line: str) -> "Envelope":
        return cls.from_record(json.loads(line))


class Publisher:
    """Stamps envelopes with a per-topic monotone sequence number."""

    def __init__(self, publisher_id: str):
        self.publisher_id = publisher_id
        self._seq: Dict[str, int] = {}

    def envelope(self, topic: Topic, payload: Payload, ts_ms: int, campaign: Optional[str] = None) -> Envelope:
        key = str(topic.canonical())
        seq = self._seq.get(key, 0) + 1
        self._seq[key] = seq
        return Envelope(topic, topic.thing_id, seq, ts_ms, payload, campaign)


# --- bus ---------------------------------------------------------------------

class Delivery(NamedTuple):
    envelope: Envelope
    published_ns: int


@dataclass(frozen=True)
class DeliveryReceipt:
    delivered_to: int
    published_ns: int


_CLOSED = object()


class Subscription:
    """One consumer's stream of matching deliveries."""

    def __init__(self, bus: "Bus", topic_filter: TopicFilter):
        self.bus = bus
        self.filter = topic_filter
        self._queue: "queue.Queue[Any]" = queue.Queue()
        self.cancelled = False
        self.received = 0

    def _offer(self, delivery: Delivery) -> None:
        self.received += 1
        self._queue.put(delivery)

    def get(self, timeout: Optional[float] = None) -> Optional[Delivery]:
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        return None if item is _CLOSED else item

    def drain(self) -> List[Delivery]:
        items: List[Delivery] = []
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return items
            if item is not _CLOSED:
                items.append(item)

    def pending(self) -> int:
        return self._queue.qsize()

    def __iter__(self) -> Iterator[Delivery]:
        while True:
            item = self._queue.get()
            if item is _CLOSED:
                return
            yield item

    def cancel(self) -> None:
        if not self.cancelled:
            self.cancelled = True
            self.bus._unsubscribe(self)
            self._queue.put(_CLOSED)


class Bus:
    """At-most-once in-process broker; safe for concurrent publishers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._index = MQTTMatcher()
        self._patterns: Dict[str, List[Subscription]] = {}
        self.closed = False
        self.published = 0

    def subscribe(self, topic_filter: Any) -> Subscription:
        if not isinstance(topic_filter, TopicFilter):
            topic_filter = TopicFilter(str(topic_filter))
        sub = Subscription(self, topic_filter)
        with self._lock:
            if self.closed:
                raise BusClosedError("bus is shut down")
            subs = self._patterns.setdefault(topic_filter.pattern, [])
            subs.append(sub)
            self._index[topic_filter.pattern] = subs
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._patterns.get(sub.filter.pattern, [])
            if sub in subs:
                subs.remove(sub)
            if not subs and sub.filter.pattern in self._patterns:
                del self._patterns[sub.filter.pattern]
                del self._index[sub.filter.pattern]

    def publish(self, env: Envelope) -> DeliveryReceipt:
        topic = str(env.topic)
        with self._lock:
            if self.closed:
                raise BusClosedError(f"publish to '{topic}' rejected after shutdown")
            published_ns = time.monotonic_ns()
            delivery = Delivery(env, published_ns)
            count = 0
            for subs in self._index.iter_match(topic):
                for sub in subs:
                    sub._offer(delivery)
                    count += 1
            self.published += 1
        return DeliveryReceipt(count, published_ns)

    def shutdown(self) -> None:
        with self._lock:
            self.closed = True
            subs = [s for group in self._patterns.values() for s in group]
        for sub in subs:
            sub.cancel()


def publish(bus: Bus, env: Envelope) -> DeliveryReceipt:
    return bus.publish(env)


def subscribe(bus: Bus, topic_filter: Any) -> Subscription:
    return bus.subscribe(topic_filter)


# --- record / replay ---------------------------------------------------------

class Recorder:
    """Writes every matching envelope as one JSON record line."""

    def __init__(self, bus: Bus, topic_filter: Any, sink_path: str):
        self.sink_path = sink_path
        self._sub = bus.subscribe(topic_filter)
        self._fh = open(sink_path, "w", encoding="utf-8")
        self.count = 0

    def flush(self) -> int:
        for delivery in self._sub.drain():
            self._fh.write(delivery.envelope.to_line() + "\n")
            self.count += 1
        self._fh.flush()
        return self.count

    def close(self) -> int:
        self.flush()
        self._sub.cancel()
        self._fh.close()
        return self.count

    def __enter__(self) -> "Recorder":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def record(bus: Bus, topic_filter: Any, sink_path: str) -> Recorder:
    return Recorder(bus, topic_filter, sink_path)


def write_records(envelopes: List[Envelope], sink_path: str) -> int:
    with open(sink_path, "w", encoding="utf-8") as fh:
        for env in envelopes:
            fh.write(env.to_line() + "\n")
    return len(envelopes)


def read_records(source_path: str) -> List[Envelope]:
    envelopes: List[Envelope] = []
    with open(source_path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
                if not line.strip():
                    continue
                envelopes.append(Envelope.from_line(line))
            except (ValueError, KeyError, TypeError, AttributeError) as e:
                # UnicodeDecodeError and JSONDecodeError are ValueErrors
                raise ReplayError(f"line {lineno}: corrupt record: {e}") from e
    return envelopes


def replay(bus: Bus, source_path: str, speed: float = 0.0, preserve_ts: bool = True) -> int:
    """Republish a record file; speed 1.0 keeps original pacing, 0 is as fast as possible."""
    if speed < 0:
        raise ReplayError(f"replay speed must be >= 0, got {speed}")
    try:
        envelopes = read_records(source_path)
    except OSError as e:
        raise ReplayError(f"cannot read '{source_path}': {e}") from e
    if not envelopes:
        return 0
    first_ts = envelopes[0].ts_ms
    offset = 0 if preserve_ts else int(time.time() * 1000) - first_ts
    started = time.monotonic()
    for env in envelopes:
        if speed > 0:
            due = (env.ts_ms - first_ts) / 1000.0 / speed
            delay = due - (time.monotonic() - started)
            if delay > 0:
                time.sleep(delay)
        if offset:
            env = Envelope(env.topic, env.thing_id, env.seq, env.ts_ms + offset, env.payload, env.campaign_tag)
        bus.publish(env)
    logger.info("replayed %d envelopes from %s", len(envelopes), source_path)
    return len(envelopes)


# --- optional TCP ingest -----------------------------------------------------

class _RecordHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        bus: Bus = self.server.bus  # type: ignore[attr-defined]
        for lineno, raw in enumerate(self.rfile, start=1):
            try:
                line = raw.decode("utf-8").strip()
                if not line:
                    continue
                bus.publish(Envelope.from_line(line))
            except (ValueError, KeyError, TypeError, AttributeError) as e:
                logger.warning("dropping corrupt record line %d from %s: %s", lineno, self.client_address, e)
            except BusClosedError:
                return


class RecordListener(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, bus: Bus, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _RecordHandler)
        self.bus = bus


def serve_tcp(bus: Bus, host: str = "127.0.0.1", port: int = 0) -> RecordListener:
    """Start a background listener accepting line-delimited record JSON."""
    server = RecordListener(bus, host, port)
    threading.Thread(target=server.serve_forever, name="record-listener", daemon=True).start()
    return server
