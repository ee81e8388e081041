import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

load_dotenv()

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

LOG_LEVEL = os.getenv("HST_LOG_LEVEL", "INFO")

ENV_KEYS = {
    "report_dir": "HST_REPORT_DIR",
    "seed": "HST_SEED",
    "engine": "HST_ENGINE",
    "replay_speed": "HST_REPLAY_SPEED",
    "fsync": "HST_FSYNC",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    fleet_path: str = os.path.join(DATA_DIR, "fleet.json")
    rules_path: str = os.path.join(DATA_DIR, "rules.json")
    fuzzy_path: str = os.path.join(DATA_DIR, "fuzzy.json")
    feature_spec_path: str = os.path.join(DATA_DIR, "feature_spec.json")
    csf_path: str = os.path.join(DATA_DIR, "csf_tags.json")
    scenario: Optional[str] = None
    engine: str = "deterministic"
    profile: str = "smoke"
    seed: int = 7
    report_dir: str = "reports"
    replay_speed: float = 0.0
    duration_ms: Optional[int] = None
    tick_ms: int = 100
    fsync: bool = True
    record_path: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PATHS = ("fleet_path", "rules_path", "fuzzy_path", "feature_spec_path", "csf_path")


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    try:
        if name in ("seed", "tick_ms", "duration_ms"):
            return int(value)
        if name == "replay_speed":
            return float(value)
        if name == "fsync":
            if isinstance(value, str):
                return value.strip().lower() not in ("0", "false", "no", "off")
            return bool(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {name}: {value!r}") from e
    return value


def _read_file(file_path: str) -> Dict[str, Any]:
    if not os.path.isfile(file_path):
        raise ConfigError(f"config file not found: {file_path}")
    try:
        with open(file_path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {file_path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {file_path} must hold a JSON object")
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys in {file_path}: {', '.join(unknown)}")
    return raw


def _check_json(path: str, name: str) -> None:
    if not os.path.isfile(path):
        raise ConfigError(f"{name} not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{name} {path} does not parse: {e}") from e


def resolve_run_config(cli: Mapping[str, Any], environ: Optional[Mapping[str, str]] = None,
                       file_path: Optional[str] = None) -> RunConfig:
    """Layer CLI flags over environment over config file over shipped defaults."""
    environ = os.environ if environ is None else environ
    merged: Dict[str, Any] = {}
    if file_path:
        merged.update(_read_file(file_path))
    for name, key in ENV_KEYS.items():
        if environ.get(key) not in (None, ""):
            merged[name] = environ[key]
    merged.update({k: v for k, v in cli.items() if v is not None and k in _FIELD_TYPES})

    values = {name: _coerce(name, value) for name, value in merged.items()}
    cfg = RunConfig(**values)

    if cfg.engine not in ("deterministic", "deterministic_only", "hybrid"):
        raise ConfigError(f"unknown engine mode: {cfg.engine}")
    if cfg.profile not in ("smoke", "baseline", "sweep"):
        raise ConfigError(f"unknown workload profile: {cfg.profile}")
    if cfg.replay_speed < 0:
        raise ConfigError(f"replay_speed must be >= 0, got {cfg.replay_speed}")
    if cfg.tick_ms < 1:
        raise ConfigError(f"tick_ms must be >= 1, got {cfg.tick_ms}")
    if cfg.duration_ms is not None and cfg.duration_ms < 0:
        raise ConfigError(f"duration_ms must be >= 0, got {cfg.duration_ms}")
    for name in _PATHS:
        _check_json(getattr(cfg, name), name)
    return cfg
