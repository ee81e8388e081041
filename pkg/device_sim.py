"""
Device Simulator Module
=======================
Physical twin of the smart-lighting CPS: lights and sensors that start in
their default state, follow the occupancy/illumination behaviour rules,
accept commands and publish telemetry on the live channel.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, TypedDict

import numpy as np

from config import ConfigError
from message_bus import Envelope, Payload, Publisher, Topic
from semantic_model import FeatureMap, Scalar, flatten_features

logger = logging.getLogger(__name__)

BRI_MAX = 254


class CommandError(ValueError):
    pass


class DeviceClass(str, Enum):
    COLOR_TEMP_LIGHT = "color_temp_light"
    DIMMABLE_LIGHT = "dimmable_light"
    ILLUMINANCE_SENSOR = "illuminance_sensor"
    TEMPERATURE_SENSOR = "temperature_sensor"
    HUMIDITY_SENSOR = "humidity_sensor"
    SWITCH = "switch"

    @property
    def is_light(self) -> bool:
        return self in (DeviceClass.COLOR_TEMP_LIGHT, DeviceClass.DIMMABLE_LIGHT)

    @property
    def saref_type(self) -> str:
        if self.is_light:
            return "LightingDevice"
        if self is DeviceClass.SWITCH:
            return "Actuator"
        return "Sensor"


class Occupancy(str, Enum):
    LOW = "low"
    HIGH = "high"


STATIC_KEYS = ("manufacturername", "modelid", "swversion", "uniqueid", "type", "name")


class DeviceSpecDict(TypedDict, total=False):
    thing_id: str
    device_class: str
    manufacturername: str
    modelid: str
    swversion: str
    uniqueid: str
    type: str
    name: str
    ctmin: int
    ctmax: int
    state: Dict[str, Any]
    publish_period_ms: int


@dataclass(frozen=True)
class DeviceSpec:
    thing_id: str
    device_class: DeviceClass
    attributes: Dict[str, Scalar] = field(default_factory=dict)
    initial: FeatureMap = field(default_factory=dict)
    publish_period_ms: int = 1000
    ctmin: int = 250
    ctmax: int = 454

    @classmethod
    def from_dict(cls, raw: DeviceSpecDict) -> "DeviceSpec":
        try:
            device_class = DeviceClass(raw["device_class"])
            thing_id = raw["thing_id"]
        except (KeyError, ValueError) as e:
            raise ConfigError(f"invalid device spec {raw!r}: {e}") from e
        attributes = {key: raw[key] for key in STATIC_KEYS if key in raw}  # type: ignore[literal-required]
        initial = flatten_features({"state": raw.get("state", {})})
        return cls(
            thing_id=thing_id,
            device_class=device_class,
            attributes=attributes,
            initial=initial,
            publish_period_ms=int(raw.get("publish_period_ms", 1000)),
            ctmin=int(raw.get("ctmin", 250)),
            ctmax=int(raw.get("ctmax", 454)),
        )


def load_fleet_specs(path: str) -> List[DeviceSpec]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [DeviceSpec.from_dict(entry) for entry in raw]


@dataclass
class Drift:
    slope_per_s: float = 0.0
    noise: float = 0.0


@dataclass
class Environment:
    occupancy: Occupancy = Occupancy.LOW
    ambient_lux: float = 120.0
    temperature_c: float = 21.0
    humidity_pct: float = 45.0
    drift: Dict[str, Drift] = field(default_factory=dict)
    seed: int = 7

    def clamp(self) -> None:
        self.ambient_lux = max(0.0, self.ambient_lux)
        self.humidity_pct = min(100.0, max(0.0, self.humidity_pct))

    def advance(self, dt_ms: int) -> None:
        seconds = dt_ms / 1000.0
        for name, attr in (("lux", "ambient_lux"), ("temperature", "temperature_c"), ("humidity", "humidity_pct")):
            d = self.drift.get(name)
            if d and d.slope_per_s:
                setattr(self, attr, getattr(self, attr) + d.slope_per_s * seconds)
        self.clamp()

    def noise(self, name: str, default: float) -> float:
        d = self.drift.get(name)
        return d.noise if d else default

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], seed: int = 7) -> "Environment":
        drift = {name: Drift(**spec) for name, spec in raw.get("drift", {}).items()}
        env = cls(
            occupancy=Occupancy(raw.get("occupancy", "low")),
            ambient_lux=float(raw.get("ambient_lux", 120.0)),
            temperature_c=float(raw.get("temperature_c", 21.0)),
            humidity_pct=float(raw.get("humidity_pct", 45.0)),
            drift=drift,
            seed=seed,
        )
        env.clamp()
        return env


@dataclass
class LightState:
    on: bool = True
    bri: int = 180
    ct: int = 250
    reachable: bool = True
    alert: str = "none"
    ctmin: int = 250
    ctmax: int = 454

    def clamp(self) -> None:
        self.bri = min(BRI_MAX, max(0, int(self.bri)))
        self.ct = min(self.ctmax, max(self.ctmin, int(self.ct)))


@dataclass(frozen=True)
class BehaviorConfig:
    lux_on_threshold: float = 200.0
    lux_dim_threshold: float = 600.0
    bri_comfort: int = 180
    dim_step: int = 40
    baseline_traffic_pps: float = 40.0
    traffic_noise_pps: float = 5.0
    lux_noise: float = 4.0
    temperature_noise: float = 0.1
    humidity_noise: float = 0.5


@dataclass(frozen=True)
class Command:
    thing_id: str
    path: str
    value: Scalar
    source_id: str
    campaign: Optional[str] = None


@dataclass(frozen=True)
class CommandResult:
    thing_id: str
    path: str
    old: Optional[Scalar]
    new: Scalar
    clamped: bool = False


Override = Callable[[int], Scalar]


class Device:
    def __init__(self, spec: DeviceSpec, behavior: BehaviorConfig, start_ms: int = 0):
        self.spec = spec
        self.attributes: Dict[str, Scalar] = dict(spec.attributes)
        self.attributes.setdefault("type", spec.device_class.value)
        self.attributes["saref.type"] = spec.device_class.saref_type
        self.light: Optional[LightState] = None
        if spec.device_class.is_light:
            self.attributes["ctmin"] = spec.ctmin
            self.attributes["ctmax"] = spec.ctmax
            init = spec.initial
            self.light = LightState(
                on=bool(init.get("state.on", True)),
                bri=int(init.get("state.bri", behavior.bri_comfort)),
                ct=int(init.get("state.ct", spec.ctmin)),
                reachable=bool(init.get("state.reachable", True)),
                alert=str(init.get("state.alert", "none")),
                ctmin=spec.ctmin,
                ctmax=spec.ctmax,
            )
            self.light.clamp()
        self.buttonevent = int(spec.initial.get("state.buttonevent", 1002))
        self.firmware_integrity = 1.0
        self.provisioning = False
        self.next_publish_ms = start_ms + spec.publish_period_ms
        self.pending_commands: List[Command] = []
        self.overrides: Dict[str, Override] = {}
        self.campaign: Optional[str] = None

    @property
    def thing_id(self) -> str:
        return self.spec.thing_id

    def command_paths(self) -> Dict[str, type]:
        paths: Dict[str, type] = {"provisioning": bool}
        if self.light is not None:
            paths.update({"state.on": bool, "state.bri": int, "state.alert": str})
            if self.spec.device_class is DeviceClass.COLOR_TEMP_LIGHT:
                paths["state.ct"] = int
        if self.spec.device_class is DeviceClass.SWITCH:
            paths["state.buttonevent"] = int
        return paths

    def read(self, path: str) -> Optional[Scalar]:
        if path == "provisioning":
            return self.provisioning
        if path == "state.buttonevent":
            return self.buttonevent
        if self.light is not None and path.startswith("state."):
            return getattr(self.light, path.split(".", 1)[1], None)
        return None

    def sample(self, env: Environment, behavior: BehaviorConfig, rng: np.random.Generator, now_ms: int) -> FeatureMap:
        # noise draws happen unconditionally so overrides never shift the random stream
        traffic_noise = float(rng.normal(0.0, behavior.traffic_noise_pps))
        sensor_noise = float(rng.normal(0.0, 1.0))
        source: FeatureMap = {
            "network.traffic_rate": behavior.baseline_traffic_pps,
            "firmware.integrity": self.firmware_integrity,
        }
        cls = self.spec.device_class
        if self.light is not None:
            source.update({
                "state.on": self.light.on,
                "state.bri": self.light.bri,
                "state.reachable": self.light.reachable,
                "state.alert": self.light.alert,
            })
            if cls is DeviceClass.COLOR_TEMP_LIGHT:
                source["state.ct"] = self.light.ct
                source["state.colormode"] = "ct"
        elif cls is DeviceClass.ILLUMINANCE_SENSOR:
            lux = env.ambient_lux + sensor_noise * env.noise("lux", behavior.lux_noise)
            source["state.lux"] = int(round(max(0.0, lux)))
            source["state.presence"] = env.occupancy is Occupancy.HIGH
        elif cls is DeviceClass.TEMPERATURE_SENSOR:
            temp = env.temperature_c + sensor_noise * env.noise("temperature", behavior.temperature_noise)
            source["state.temperature"] = round(temp, 2)
        elif cls is DeviceClass.HUMIDITY_SENSOR:
            hum = env.humidity_pct + sensor_noise * env.noise("humidity", behavior.humidity_noise)
            source["state.humidity"] = round(min(100.0, max(0.0, hum)), 2)
        elif cls is DeviceClass.SWITCH:
            source["state.buttonevent"] = self.buttonevent

        for path, override in self.overrides.items():
            source[path] = override(now_ms)
        traffic = float(source["network.traffic_rate"]) + traffic_noise
        source["network.traffic_rate"] = round(max(0.0, traffic), 1)
        if self.provisioning:
            source["provisioning"] = True
        if self.pending_commands:
            last = self.pending_commands[-1]
            source.update({
                "command.source": last.source_id,
                "command.path": last.path,
                "command.value": last.value,
                "command.count": len(self.pending_commands),
            })
        return source


class Fleet:
    """Ordered set of simulated devices sharing one seeded noise stream."""

    def __init__(self, specs: List[DeviceSpec], behavior: Optional[BehaviorConfig] = None,
                 seed: int = 7, start_ms: int = 0, publisher_id: str = "fleet"):
        self.behavior = behavior or BehaviorConfig()
        self.rng = np.random.default_rng(seed)
        self.publisher = Publisher(publisher_id)
        self.devices: Dict[str, Device] = {}
        for spec in specs:
            if spec.thing_id in self.devices:
                raise ConfigError(f"duplicate thing_id '{spec.thing_id}'")
            if spec.publish_period_ms < 1:
                raise ConfigError(f"publish_period_ms must be >= 1 for '{spec.thing_id}'")
            self.devices[spec.thing_id] = Device(spec, self.behavior, start_ms)
        self.outbox: List[Envelope] = []
        self.last_lux: Optional[float] = None
        self.last_now_ms = start_ms

    def __len__(self) -> int:
        return len(self.devices)

    def device(self, thing_id: str) -> Device:
        try:
            return self.devices[thing_id]
        except KeyError:
            raise CommandError(f"unknown thing '{thing_id}'") from None

    def envelope_for(self, thing_id: str, env: Environment, now_ms: int,
                     publisher: Optional[Publisher] = None, campaign: Optional[str] = None) -> Envelope:
        device = self.device(thing_id)
        features = device.sample(env, self.behavior, self.rng, now_ms)
        # a command tags only the envelope that reports it
        command_tag = next((c.campaign for c in reversed(device.pending_commands) if c.campaign), None)
        device.pending_commands.clear()
        tag = campaign or command_tag or device.campaign
        return (publisher or self.publisher).envelope(
            Topic.live(thing_id), Payload(dict(device.attributes), features), now_ms, tag)

    def _apply_behavior(self, env: Environment) -> None:
        b = self.behavior
        lux = env.ambient_lux
        rising = self.last_lux is not None and lux > self.last_lux
        for device in self.devices.values():
            light = device.light
            if light is None:
                continue
            if env.occupancy is Occupancy.HIGH:
                light.on, light.bri = True, BRI_MAX
            elif lux < b.lux_on_threshold:
                light.on, light.bri = True, b.bri_comfort
            elif rising or lux >= b.lux_dim_threshold:
                light.bri = max(0, light.bri - b.dim_step)
                if light.bri == 0:
                    light.on = False
            light.clamp()
        self.last_lux = lux

    def step(self, env: Environment, now_ms: int) -> List[Envelope]:
        if now_ms < self.last_now_ms:
            logger.warning("step time went backwards (%d < %d); ignoring", now_ms, self.last_now_ms)
            return []
        self.last_now_ms = now_ms
        env.clamp()
        self._apply_behavior(env)
        out, self.outbox = self.outbox, []
        for device in self.devices.values():
            if now_ms >= device.next_publish_ms:
                out.append(self.envelope_for(device.thing_id, env, now_ms))
                period = device.spec.publish_period_ms
                while device.next_publish_ms <= now_ms:
                    device.next_publish_ms += period
        return out

    def apply_command(self, cmd: Command) -> CommandResult:
        device = self.device(cmd.thing_id)
        paths = device.command_paths()
        if cmd.path not in paths:
            raise CommandError(f"thing '{cmd.thing_id}' has no commandable feature '{cmd.path}'")
        expected = paths[cmd.path]
        value = cmd.value
        if expected is int and isinstance(value, float) and not isinstance(value, bool):
            value = int(round(value))
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise CommandError(f"value {cmd.value!r} is not a valid {expected.__name__} for '{cmd.path}'")

        old = device.read(cmd.path)
        clamped = False
        if cmd.path == "provisioning":
            device.provisioning = bool(value)
        elif cmd.path == "state.buttonevent":
            device.buttonevent = int(value)
        else:
            light = device.light
            assert light is not None
            attr = cmd.path.split(".", 1)[1]
            setattr(light, attr, value)
            before = getattr(light, attr)
            light.clamp()
            clamped = getattr(light, attr) != before
            value = getattr(light, attr)
        if clamped:
            logger.warning("command on %s %s clamped to %r", cmd.thing_id, cmd.path, value)
        device.pending_commands.append(cmd)
        return CommandResult(cmd.thing_id, cmd.path, old, value, clamped)

    def set_attribute(self, thing_id: str, name: str, value: Scalar) -> Optional[Scalar]:
        device = self.device(thing_id)
        old = device.attributes.get(name)
        device.attributes[name] = value
        return old

    def set_override(self, thing_id: str, path: str, fn: Override) -> None:
        self.device(thing_id).overrides[path] = fn

    def clear_override(self, thing_id: str, path: str) -> None:
        self.device(thing_id).overrides.pop(path, None)


def init_fleet(specs: List[DeviceSpec], env: Optional[Environment] = None,
               behavior: Optional[BehaviorConfig] = None, seed: int = 7, start_ms: int = 0) -> Fleet:
    """Build the fleet in its default state and queue one initial envelope per device."""
    fleet = Fleet(specs, behavior, seed, start_ms)
    env = env or Environment(seed=seed)
    for thing_id in fleet.devices:
        fleet.outbox.append(fleet.envelope_for(thing_id, env, start_ms))
    return fleet


def step(fleet: Fleet, env: Environment, now_ms: int) -> List[Envelope]:
    return fleet.step(env, now_ms)


def apply_command(fleet: Fleet, cmd: Command) -> CommandResult:
    return fleet.apply_command(cmd)
