"""
Scenario Injector Module
========================
Campaign-style attack scripts replayed against the simulated fleet on a
virtual clock, with exact ground-truth injection timestamps. Also hosts the
simulation runner that ticks fleet, twin mirror, injector and pipelines.
"""

import heapq
import itertools
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from device_sim import Command, CommandError, Drift, Environment, Fleet, Occupancy
from hybrid_pipeline import HybridPipeline
from message_bus import Bus, Payload, Publisher, Recorder, Subscription, Topic
from twin_core import TwinMirror, TwinRegistry

logger = logging.getLogger(__name__)

KNOWN_CAMPAIGNS = frozenset({"C0012", "C0020", "C0025", "C0028"})
TTP_PATTERN = re.compile(r"^T\d{4}(\.\d{3})?$")
SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "scenarios")
BUILTIN_NAMES = ("uc1_c0012", "uc2_mixed", "ramp_gradual_onset", "nominal_only")


class ScenarioLoadError(ValueError):
    pass


class EventKind(str, Enum):
    UNAUTHORIZED_COMMAND = "unauthorized_command"
    CONFIG_TAMPER = "config_tamper"
    TWIN_SPOOF = "twin_spoof"
    STATE_SUPPRESS = "state_suppress"
    TELEMETRY_BURST = "telemetry_burst"
    C2_TOGGLE_TRAIN = "c2_toggle_train"
    RAMP = "ramp"


# required parameter -> accepted types
REQUIRED_PARAMS: Dict[EventKind, Dict[str, Tuple[type, ...]]] = {
    EventKind.UNAUTHORIZED_COMMAND: {"source": (str,), "path": (str,), "value": (bool, int, float, str)},
    EventKind.CONFIG_TAMPER: {"value": (str,)},
    EventKind.TWIN_SPOOF: {"path": (str,), "value": (bool, int, float, str)},
    EventKind.STATE_SUPPRESS: {"duration_ms": (int,)},
    EventKind.TELEMETRY_BURST: {"n": (int,), "window_ms": (int,)},
    EventKind.C2_TOGGLE_TRAIN: {"source": (str,), "k": (int,), "period_ms": (int,)},
    EventKind.RAMP: {"feature": (str,), "from": (int, float), "to": (int, float), "duration_ms": (int,)},
}


@dataclass(frozen=True)
class ScenarioEvent:
    at_ms: int
    kind: EventKind
    thing_id: str
    campaign: str
    ttp: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Phase:
    at_ms: int
    occupancy: Optional[Occupancy] = None
    ambient_lux: Optional[float] = None
    drift: Optional[Mapping[str, Any]] = None


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    events: Tuple[ScenarioEvent, ...]
    duration_ms: int = 60_000
    environment: Mapping[str, Any] = field(default_factory=dict)
    phases: Tuple[Phase, ...] = ()

    def initial_environment(self, seed: Optional[int] = None) -> Environment:
        return Environment.from_dict(dict(self.environment), self.seed if seed is None else seed)


def _event(raw: Mapping[str, Any], index: int) -> ScenarioEvent:
    where = f"event {index}"
    try:
        kind = EventKind(raw["kind"])
    except KeyError:
        raise ScenarioLoadError(f"{where}: missing kind") from None
    except ValueError:
        raise ScenarioLoadError(f"{where}: unknown kind {raw['kind']!r}") from None
    at_ms = raw.get("at_ms")
    if not isinstance(at_ms, int) or isinstance(at_ms, bool) or at_ms < 0:
        raise ScenarioLoadError(f"{where}: at_ms must be a non-negative integer, got {at_ms!r}")
    thing_id = raw.get("thing_id")
    if not thing_id or not isinstance(thing_id, str):
        raise ScenarioLoadError(f"{where}: missing thing_id")
    campaign, ttp = raw.get("campaign"), raw.get("ttp")
    if campaign not in KNOWN_CAMPAIGNS:
        raise ScenarioLoadError(f"{where}: unknown campaign {campaign!r}")
    if not isinstance(ttp, str) or not TTP_PATTERN.match(ttp):
        raise ScenarioLoadError(f"{where}: malformed ttp {ttp!r}")
    params = dict(raw.get("params", {}))
    for name, types in REQUIRED_PARAMS[kind].items():
        value = params.get(name)
        if value is None or not isinstance(value, types) or (isinstance(value, bool) and bool not in types):
            raise ScenarioLoadError(f"{where}: parameter '{name}' missing or not {'/'.join(t.__name__ for t in types)}")
    for name in ("n", "k", "period_ms", "window_ms", "duration_ms"):
        if name in params and params[name] <= 0:
            raise ScenarioLoadError(f"{where}: parameter '{name}' must be > 0")
    co = params.get("co_ramp")
    if co is not None and not (isinstance(co, dict) and {"feature", "from", "to"} <= set(co)):
        raise ScenarioLoadError(f"{where}: co_ramp needs feature/from/to")
    return ScenarioEvent(at_ms, kind, thing_id, campaign, ttp, params)


def scenario_from_dict(raw: Mapping[str, Any], name: Optional[str] = None) -> Scenario:
    events = [_event(e, i) for i, e in enumerate(raw.get("events", []))]
    events.sort(key=lambda e: e.at_ms)
    phases = []
    for i, p in enumerate(raw.get("phases", [])):
        try:
            phases.append(Phase(
                int(p["at_ms"]),
                Occupancy(p["occupancy"]) if "occupancy" in p else None,
                float(p["ambient_lux"]) if "ambient_lux" in p else None,
                p.get("drift"),
            ))
        except (KeyError, ValueError) as e:
            raise ScenarioLoadError(f"phase {i}: {e}") from e
    return Scenario(
        name=raw.get("name") or name or "scenario",
        seed=int(raw.get("seed", 7)),
        events=tuple(events),
        duration_ms=int(raw.get("duration_ms", 60_000)),
        environment=dict(raw.get("environment", {})),
        phases=tuple(sorted(phases, key=lambda p: p.at_ms)),
    )


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioLoadError(f"cannot load scenario '{path}': {e}") from e
    return scenario_from_dict(raw, os.path.splitext(os.path.basename(path))[0])


def builtin_scenarios(directory: str = SCENARIO_DIR) -> List[Tuple[str, Scenario]]:
    return [(name, load_scenario(os.path.join(directory, f"{name}.json"))) for name in BUILTIN_NAMES]


def resolve_scenario(name_or_path: str, directory: str = SCENARIO_DIR) -> Scenario:
    if os.path.exists(name_or_path):
        return load_scenario(name_or_path)
    candidate = os.path.join(directory, f"{name_or_path}.json")
    if not os.path.exists(candidate):
        raise ScenarioLoadError(f"unknown scenario '{name_or_path}'")
    return load_scenario(candidate)


# --- ground truth ------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthEntry:
    campaign: str
    ttp: str
    thing_id: str
    injection_ts_ms: int
    kind: EventKind
    executed: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "campaign": self.campaign,
            "ttp": self.ttp,
            "thing_id": self.thing_id,
            "injection_ts_ms": self.injection_ts_ms,
            "kind": self.kind.value,
            "status": "executed" if self.executed else "not_executed",
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "GroundTruthEntry":
        return cls(raw["campaign"], raw["ttp"], raw["thing_id"], int(raw["injection_ts_ms"]),
                   EventKind(raw["kind"]), raw.get("status", "executed") == "executed")


GroundTruth = List[GroundTruthEntry]


# --- virtual clock -------------------------------------------------------------

class VirtualClock:
    def __init__(self, start_ms: int = 0):
        self.now_ms = start_ms

    def advance(self, dt_ms: int) -> int:
        self.now_ms += dt_ms
        return self.now_ms


class Scheduler:
    """Actions keyed by virtual due time; ties run in scheduling order."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: List[Tuple[int, int, Callable[[int], None]]] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def at(self, due_ms: int, action: Callable[[int], None]) -> None:
        heapq.heappush(self._heap, (due_ms, next(self._seq), action))

    def run_due(self) -> int:
        ran = 0
        while self._heap and self._heap[0][0] <= self.clock.now_ms:
            _, _, action = heapq.heappop(self._heap)
            action(self.clock.now_ms)
            ran += 1
        return ran


class Injector:
    def __init__(self, scenario: Scenario, bus: Bus, fleet: Fleet, twin: TwinRegistry,
                 scheduler: Scheduler, env: Environment, start_ms: int = 0):
        self.scenario = scenario
        self.bus = bus
        self.fleet = fleet
        self.twin = twin
        self.scheduler = scheduler
        self.env = env
        self.start_ms = start_ms
        self.publisher = Publisher("injector")
        self.ground_truth: GroundTruth = []

    def arm(self) -> GroundTruth:
        for event in self.scenario.events:
            self.scheduler.at(self.start_ms + event.at_ms, lambda now, e=event: self._execute(e, now))
        return self.ground_truth

    def _record(self, event: ScenarioEvent, now: int, executed: bool = True) -> None:
        self.ground_truth.append(GroundTruthEntry(event.campaign, event.ttp, event.thing_id, now, event.kind, executed))

    def _execute(self, event: ScenarioEvent, now: int) -> None:
        if event.thing_id not in self.fleet.devices:
            logger.warning("scenario %s: target '%s' missing, %s skipped",
                           self.scenario.name, event.thing_id, event.kind.value)
            self._record(event, now, executed=False)
            return
        handler = getattr(self, f"_do_{event.kind.value}")
        try:
            handler(event, now)
        except CommandError as e:
            logger.warning("scenario %s: %s on %s skipped: %s", self.scenario.name, event.kind.value, event.thing_id, e)
            self._record(event, now, executed=False)
            return
        self._record(event, now)

    def _tag(self, event: ScenarioEvent) -> None:
        self.fleet.device(event.thing_id).campaign = event.campaign

    def _do_unauthorized_command(self, event: ScenarioEvent, now: int) -> None:
        p = event.params
        self.fleet.apply_command(Command(event.thing_id, p["path"], p["value"], p["source"], event.campaign))

    def _do_config_tamper(self, event: ScenarioEvent, now: int) -> None:
        attribute = event.params.get("attribute", "swversion")
        old = self.fleet.set_attribute(event.thing_id, attribute, event.params["value"])
        self._tag(event)
        logger.info("tampered %s.%s: %r -> %r", event.thing_id, attribute, old, event.params["value"])

    def _do_twin_spoof(self, event: ScenarioEvent, now: int) -> None:
        record = self.twin.get(event.thing_id)
        attributes = dict(record.attributes) if record else {}
        payload = Payload(attributes, {event.params["path"]: event.params["value"]})
        self.bus.publish(self.publisher.envelope(Topic.twin(event.thing_id), payload, now, event.campaign))

    def _do_state_suppress(self, event: ScenarioEvent, now: int) -> None:
        path = event.params.get("path", "state.on")
        value = event.params.get("value", False)
        self.fleet.set_override(event.thing_id, path, lambda t: value)
        self._tag(event)
        self.scheduler.at(now + event.params["duration_ms"],
                          lambda t: self.fleet.clear_override(event.thing_id, path))

    def _do_telemetry_burst(self, event: ScenarioEvent, now: int) -> None:
        n, window = event.params["n"], event.params["window_ms"]
        self._tag(event)

        def burst(t: int) -> None:
            env = self.fleet.envelope_for(event.thing_id, self.env, t, campaign=event.campaign)
            self.bus.publish(env)

        for i in range(n):
            due = now + (i * window) // n
            if due <= now:
                burst(now)
            else:
                self.scheduler.at(due, burst)

    def _do_c2_toggle_train(self, event: ScenarioEvent, now: int) -> None:
        p = event.params
        path = p.get("path", "state.on")

        def toggle(t: int, value: bool) -> None:
            try:
                self.fleet.apply_command(Command(event.thing_id, path, value, p["source"], event.campaign))
            except CommandError as e:
                logger.warning("toggle on %s failed: %s", event.thing_id, e)

        for i in range(p["k"]):
            value = i % 2 == 0
            if i == 0:
                toggle(now, value)
            else:
                self.scheduler.at(now + i * p["period_ms"], lambda t, v=value: toggle(t, v))

    def _do_ramp(self, event: ScenarioEvent, now: int) -> None:
        p = event.params
        duration = p["duration_ms"]

        def linear(start: float, end: float) -> Callable[[int], float]:
            def value(t: int) -> float:
                frac = min(1.0, max(0.0, (t - now) / duration))
                return start + (end - start) * frac
            return value

        self.fleet.set_override(event.thing_id, p["feature"], linear(float(p["from"]), float(p["to"])))
        co = p.get("co_ramp")
        if co:
            self.fleet.set_override(event.thing_id, co["feature"], linear(float(co["from"]), float(co["to"])))
        self._tag(event)


def inject(scenario: Scenario, bus: Bus, fleet: Fleet, twin: TwinRegistry, clock: Scheduler,
           env: Optional[Environment] = None) -> GroundTruth:
    """Arm every event on the scheduler; the returned list fills as the clock advances."""
    injector = Injector(scenario, bus, fleet, twin, clock, env or scenario.initial_environment(), clock.clock.now_ms)
    return injector.arm()


# --- simulation runner ---------------------------------------------------------

@dataclass
class SimulationResult:
    scenario: str
    ground_truth: GroundTruth
    published: int
    duration_ms: int
    record_path: Optional[str] = None


class Simulation:
    def __init__(self, fleet: Fleet, env: Environment, pipelines: Sequence[HybridPipeline] = (),
                 bus: Optional[Bus] = None, tick_ms: int = 100, speed: float = 0.0,
                 record_path: Optional[str] = None, mirror: bool = True):
        if tick_ms <= 0:
            raise ValueError(f"tick_ms must be > 0, got {tick_ms}")
        self.fleet = fleet
        self.env = env
        self.bus = bus or Bus()
        self.tick_ms = tick_ms
        self.speed = speed
        self.clock = VirtualClock(fleet.last_now_ms)
        self.scheduler = Scheduler(self.clock)
        self.registry = TwinRegistry()
        self.mirror = TwinMirror() if mirror else None
        self._mirror_sub: Optional[Subscription] = self.bus.subscribe("live/#") if mirror else None
        self._registry_sub = self.bus.subscribe("#")
        self.pipelines = list(pipelines)
        self._subs = [self.bus.subscribe("#") for _ in self.pipelines]
        self.recorder = Recorder(self.bus, "#", record_path) if record_path else None

    def _apply_phase(self, phase: Phase) -> None:
        if phase.occupancy is not None:
            self.env.occupancy = phase.occupancy
        if phase.ambient_lux is not None:
            self.env.ambient_lux = phase.ambient_lux
        if phase.drift is not None:
            self.env.drift = {name: Drift(**spec) for name, spec in phase.drift.items()}
        self.env.clamp()

    def tick(self) -> None:
        self.scheduler.run_due()
        for envelope in self.fleet.step(self.env, self.clock.now_ms):
            self.bus.publish(envelope)
        if self.mirror is not None and self._mirror_sub is not None:
            for delivery in self._mirror_sub.drain():
                forwarded = self.mirror.sync(delivery.envelope)
                if forwarded is not None:
                    self.bus.publish(forwarded)
        for delivery in self._registry_sub.drain():
            self.registry.apply_update(delivery.envelope)
        for pipeline, sub in zip(self.pipelines, self._subs):
            pipeline.pump(sub)
        if self.recorder is not None:
            self.recorder.flush()

    def run(self, scenario: Scenario, duration_ms: Optional[int] = None) -> SimulationResult:
        start = self.clock.now_ms
        for phase in scenario.phases:
            self.scheduler.at(start + phase.at_ms, lambda now, p=phase: self._apply_phase(p))
        injector = Injector(scenario, self.bus, self.fleet, self.registry, self.scheduler, self.env, start)
        ground_truth = injector.arm()
        end = start + (scenario.duration_ms if duration_ms is None else duration_ms)
        wall_start = time.monotonic()
        while self.clock.now_ms <= end:
            self.tick()
            if self.speed > 0:
                due = (self.clock.now_ms - start + self.tick_ms) / 1000.0 / self.speed
                delay = due - (time.monotonic() - wall_start)
                if delay > 0:
                    time.sleep(delay)
            self.env.advance(self.tick_ms)
            self.clock.advance(self.tick_ms)
        record_path = None
        if self.recorder is not None:
            self.recorder.close()
            record_path = self.recorder.sink_path
        logger.info("scenario %s finished: %d envelopes, %d injections",
                    scenario.name, self.bus.published, len(ground_truth))
        return SimulationResult(scenario.name, ground_truth, self.bus.published, end - start, record_path)
