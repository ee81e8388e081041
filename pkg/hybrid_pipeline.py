"""
Hybrid Pipeline Module
======================
Per-message reasoning path: twin update, semantic enrichment and lifting,
incremental Rete evaluation, fuzzy scoring, alert merge with TTP/CSF tags,
plus the detection-time accounting used by the comparison reports.
"""

import itertools
import json
import logging
import re
import time
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Deque, Dict, FrozenSet, Iterable, List, Mapping, Optional, Protocol, Sequence, Set, Tuple

from fuzzy_engine import Band, DimensionError, FuzzyConfig, FuzzyConfigError, band, classify, evaluate
from message_bus import Channel, Envelope, Subscription
from metrics import LatencySample
from rete_engine import CHANGED_SUFFIX, CrispRule, Firing, ReteNetwork, Severity
from semantic_model import (
    DeltaStatus,
    DeviceObservation,
    FactBase,
    FactKey,
    FactKind,
    FeatureExtractionError,
    FeatureMap,
    FeatureSpec,
    ObservationError,
    SemanticFact,
    feature_vector,
    lift,
)
from twin_core import TwinRegistry

logger = logging.getLogger(__name__)

DEFAULT_DEDUP_MS = 5000
UNMAPPED = "UNMAPPED"


class EngineMode(str, Enum):
    DETERMINISTIC = "deterministic"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, value: str) -> "EngineMode":
        if value == "deterministic_only":
            return cls.DETERMINISTIC
        return cls(value)


class Origin(str, Enum):
    DETERMINISTIC = "deterministic"
    FUZZY = "fuzzy"
    HYBRID = "hybrid"


def _ms(value: Any) -> float:
    ms = float(value)
    return int(ms) if ms.is_integer() else ms


@dataclass(frozen=True)
class Alert:
    alert_id: str
    thing_id: str
    origin: Origin
    ttp: str
    severity: Severity
    raised_at_ms: float
    trigger_ts_ms: float
    explanation: Tuple[Dict[str, Any], ...]
    rule_id: Optional[str] = None
    mu: Optional[float] = None
    band: Optional[Band] = None
    campaign: Optional[str] = None
    csf_tag: Optional[str] = None
    message: str = ""
    processing_ms: float = field(default=0.0, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alert_id": self.alert_id,
            "thing_id": self.thing_id,
            "origin": self.origin.value,
            "rule_id": self.rule_id,
            "mu": self.mu,
            "band": self.band.value if self.band else None,
            "ttp": self.ttp,
            "campaign": self.campaign,
            "csf_tag": self.csf_tag,
            "severity": self.severity.value,
            "raised_at_ms": self.raised_at_ms,
            "trigger_ts_ms": self.trigger_ts_ms,
            "message": self.message,
            "explanation": list(self.explanation),
            "processing_ms": self.processing_ms,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Alert":
        return cls(
            alert_id=raw["alert_id"],
            thing_id=raw["thing_id"],
            origin=Origin(raw["origin"]),
            ttp=raw["ttp"],
            severity=Severity(raw["severity"]),
            raised_at_ms=_ms(raw["raised_at_ms"]),
            trigger_ts_ms=_ms(raw["trigger_ts_ms"]),
            explanation=tuple(raw.get("explanation", ())),
            rule_id=raw.get("rule_id"),
            mu=raw.get("mu"),
            band=Band(raw["band"]) if raw.get("band") else None,
            campaign=raw.get("campaign"),
            csf_tag=raw.get("csf_tag"),
            message=raw.get("message", ""),
            processing_ms=float(raw.get("processing_ms", 0.0)),
        )


# --- CSF tagging -------------------------------------------------------------

@dataclass(frozen=True)
class CsfMap:
    by_origin: Mapping[str, str]
    overrides: Mapping[str, str] = field(default_factory=dict)
    descriptions: Mapping[str, str] = field(default_factory=dict)

    def tag_for(self, alert: Alert, rule_csf: Optional[str] = None) -> str:
        if alert.rule_id and alert.rule_id in self.overrides:
            return self.overrides[alert.rule_id]
        if rule_csf:
            return rule_csf
        tag = self.by_origin.get(alert.origin.value)
        if tag is None:
            logger.warning("no CSF tag for origin '%s' (alert %s)", alert.origin.value, alert.alert_id)
            return UNMAPPED
        return tag

    def describe(self, tag: Optional[str]) -> str:
        return self.descriptions.get(tag or "", "")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "CsfMap":
        by_origin = {k: v for k, v in raw.items() if k in {o.value for o in Origin} and isinstance(v, str)}
        return cls(by_origin, dict(raw.get("overrides", {})), dict(raw.get("descriptions", {})))


DEFAULT_CSF_MAP = CsfMap(
    {"deterministic": "DE.DP-5", "fuzzy": "RS.RP-1", "hybrid": "RS.RP-1"},
    {},
    {
        "DE.DP-5": "Detection processes are continuously improved",
        "RS.RP-1": "Response plan is executed during or after an incident",
    },
)


def load_csf_map(path: str) -> CsfMap:
    with open(path, encoding="utf-8") as fh:
        return CsfMap.from_dict(json.load(fh))


def tag_csf(alert: Alert, csf_map: CsfMap = DEFAULT_CSF_MAP, rule_csf: Optional[str] = None) -> Alert:
    return replace(alert, csf_tag=csf_map.tag_for(alert, rule_csf))


# --- security context ----------------------------------------------------------

@dataclass(frozen=True)
class SecurityContext:
    """Thresholds and source lists behind the derived security predicates."""

    allowlist: FrozenSet[str] = frozenset({"operator-1", "scheduler", "hmi-1"})
    known_sources: FrozenSet[str] = frozenset({"eng-ws-07", "maintenance-laptop"})
    burst_window_ms: int = 10_000
    command_window_ms: int = 60_000
    firmware_degraded_below: float = 0.5
    off_persist_ms: int = 2000
    mismatch_path: str = "state.on"


class EventSink(Protocol):
    def persist(self, event: Dict[str, Any]) -> float: ...


class InjectionLike(Protocol):
    campaign: str
    ttp: str
    thing_id: str
    injection_ts_ms: int
    executed: bool


_TEMPLATE_FIELD = re.compile(r"\{([a-z0-9_.]+)\}")


class HybridPipeline:
    def __init__(
        self,
        rules: Sequence[CrispRule],
        fuzzy_cfg: Optional[FuzzyConfig] = None,
        feature_spec: Optional[FeatureSpec] = None,
        mode: EngineMode = EngineMode.DETERMINISTIC,
        csf_map: CsfMap = DEFAULT_CSF_MAP,
        context: Optional[SecurityContext] = None,
        dedup_ms: int = DEFAULT_DEDUP_MS,
        registry: Optional[TwinRegistry] = None,
        sink: Optional[EventSink] = None,
    ):
        if mode is EngineMode.HYBRID:
            if fuzzy_cfg is None or feature_spec is None:
                raise FuzzyConfigError("hybrid mode needs a fuzzy config and a feature spec")
            if fuzzy_cfg.dimension != feature_spec.dimension:
                raise FuzzyConfigError(
                    f"fuzzy config has {fuzzy_cfg.dimension} inputs, feature spec has {feature_spec.dimension}")
            if fuzzy_cfg.features and tuple(fuzzy_cfg.features) != tuple(feature_spec.predicates):
                raise FuzzyConfigError("fuzzy inputs are not aligned with the feature spec entries")
        self.mode = mode
        self.rules = {r.rule_id: r for r in rules}
        self.net = ReteNetwork(rules)
        self.fuzzy_cfg = fuzzy_cfg
        self.feature_spec = feature_spec
        self.csf_map = csf_map
        self.context = context or SecurityContext()
        self.dedup_ms = dedup_ms
        self.registry = registry or TwinRegistry()
        self.sink = sink
        self.fb = FactBase()
        self.wm: Dict[FactKey, SemanticFact] = {}
        self.now_ms = 0
        self.alerts: List[Alert] = []
        self.samples: List[LatencySample] = []
        self.band_counts: Counter = Counter()
        self.processed = 0
        self.suppressed = 0
        self.persist_failures = 0
        self._alert_ids = itertools.count(1)
        self._last_raised: Dict[Tuple[str, str, Origin], float] = {}
        self._campaign: Dict[str, str] = {}
        self._bursts: Dict[str, Deque[int]] = {}
        self._commands: Dict[str, Deque[Tuple[int, int]]] = {}

    # -- enrichment --

    def _twin_features(self, thing_id: str) -> FeatureMap:
        record = self.registry.get(thing_id)
        path = self.context.mismatch_path
        if record is None or path not in record.live_features:
            return {}
        mismatch = self.registry.divergence(thing_id, path, 1, self.now_ms)
        aligned = mismatch is not None and mismatch.age_ms >= self.registry.grace_ms
        derived: FeatureMap = {
            "twin.state_on_mismatch": aligned,
            "twin.mismatch_age_ms": mismatch.age_ms if mismatch else 0,
        }
        live = record.live_features[path]
        if live.value is False:
            off_ms = max(0, self.now_ms - live.since_ms)
            derived["state.reported_off_ms"] = off_ms
            derived["state.off_persisted"] = off_ms >= self.context.off_persist_ms
        return derived

    def _enrich(self, env: Envelope) -> FeatureMap:
        ctx = self.context
        features: FeatureMap = dict(env.payload.features)
        thing = env.thing_id

        source = features.get("command.source")
        if source is not None:
            features["unauthorized_command"] = source not in ctx.allowlist
            features["command.source_known"] = source in ctx.allowlist or source in ctx.known_sources
            features["command.state_write"] = str(features.get("command.path", "")).startswith("state.")

        integrity = features.get("firmware.integrity")
        if isinstance(integrity, (int, float)) and not isinstance(integrity, bool):
            features["firmware.integrity_loss"] = round(1.0 - float(integrity), 6)
            features["firmware_integrity"] = "degraded" if integrity < ctx.firmware_degraded_below else "intact"

        bursts = self._bursts.setdefault(thing, deque())
        bursts.append(env.ts_ms)
        while bursts and bursts[0] <= env.ts_ms - ctx.burst_window_ms:
            bursts.popleft()
        features["telemetry.burst_rate"] = len(bursts)

        commands = self._commands.setdefault(thing, deque())
        count = features.get("command.count")
        if isinstance(count, int) and not isinstance(count, bool) and count > 0:
            commands.append((env.ts_ms, count))
        while commands and commands[0][0] <= env.ts_ms - ctx.command_window_ms:
            commands.popleft()
        features["command.rate"] = sum(c for _, c in commands)

        features.update(self._twin_features(thing))
        return features

    # -- working memory --

    def _assert(self, fact: SemanticFact, transients: List[SemanticFact]) -> None:
        delta = self.fb.assert_fact(fact)
        if delta.status is DeltaStatus.INSERTED:
            self.net.add(fact)
            self.wm[fact.key] = fact
        elif delta.status is DeltaStatus.REPLACED and delta.value_changed:
            old = self.wm.pop(fact.key, None)
            if old is not None:
                self.net.remove(old.fact_id)
            self.net.add(fact)
            self.wm[fact.key] = fact
            changed = SemanticFact(self.fb.next_id(), fact.thing_id, fact.predicate + CHANGED_SUFFIX,
                                   True, fact.ts_ms, FactKind.DYNAMIC_PROPERTY)
            self.net.add(changed)
            transients.append(changed)

    def _sweep(self, thing_id: str, present: Iterable[str]) -> None:
        keep = set(present)
        for fact in self.fb.query(thing_id):
            if fact.kind is FactKind.DYNAMIC_PROPERTY and fact.predicate not in keep:
                self.fb.retract(thing_id, fact.predicate)
                old = self.wm.pop(fact.key, None)
                if old is not None:
                    self.net.remove(old.fact_id)

    def _update_facts(self, env: Envelope) -> List[Firing]:
        transients: List[SemanticFact] = []
        if env.channel is Channel.LIVE:
            features = self._enrich(env)
            obs = DeviceObservation(env.thing_id, dict(env.payload.attributes), features, env.ts_ms)
            facts = lift(obs, self.fb.id_source)
            self._sweep(env.thing_id, features)
        else:
            obs = DeviceObservation(env.thing_id, {}, self._twin_features(env.thing_id), env.ts_ms)
            facts = lift(obs, self.fb.id_source)
        for fact in facts:
            self._assert(fact, transients)
        firings = self.net.fire()
        for fact in transients:
            self.net.remove(fact.fact_id)
        return firings

    # -- alerts --

    def _campaign_for(self, env: Envelope) -> Optional[str]:
        if env.campaign_tag:
            self._campaign[env.thing_id] = env.campaign_tag
        return self._campaign.get(env.thing_id)

    def _render(self, template: str, thing_id: str) -> str:
        def lookup(match: "re.Match[str]") -> str:
            name = match.group(1)
            if name == "thing":
                return thing_id
            fact = self.fb.get(thing_id, name)
            return str(fact.value) if fact is not None else match.group(0)
        return _TEMPLATE_FIELD.sub(lookup, template)

    def _next_id(self) -> str:
        return f"A{next(self._alert_ids):06d}"

    def _deterministic_alerts(self, firings: List[Firing], env: Envelope, campaign: Optional[str]) -> List[Alert]:
        alerts = []
        for firing in firings:
            thing = firing.facts[0].thing_id
            rule = self.rules[firing.rule_id]
            alert = Alert(
                alert_id=self._next_id(),
                thing_id=thing,
                origin=Origin.DETERMINISTIC,
                ttp=firing.action.ttp,
                severity=firing.action.severity,
                raised_at_ms=self.now_ms,
                trigger_ts_ms=env.ts_ms,
                explanation=tuple(f.to_dict() for f in firing.facts),
                rule_id=firing.rule_id,
                campaign=campaign if thing == env.thing_id else self._campaign.get(thing),
                message=self._render(firing.action.message, thing),
            )
            alerts.append(tag_csf(alert, self.csf_map, rule.action.csf_tag))
        return alerts

    def _active_detections(self) -> Set[Tuple[str, str]]:
        active: Set[Tuple[str, str]] = set()
        for node in self.net.nodes:
            for token in node.satisfied:
                active.add((self.net.wm[token[0]].thing_id, node.rule.action.ttp))
        return active

    def _fuzzy_alert(self, env: Envelope, campaign: Optional[str]) -> Optional[Alert]:
        cfg, spec = self.fuzzy_cfg, self.feature_spec
        assert cfg is not None and spec is not None
        vector = feature_vector(self.fb, spec, env.thing_id)
        outcome = evaluate(cfg, vector)
        risk = band(outcome.mu, cfg.bands)
        self.band_counts[risk.value] += 1
        if not classify(outcome.mu, cfg.theta):
            return None
        ttp = outcome.ttp or UNMAPPED
        origin = Origin.HYBRID if (env.thing_id, ttp) in self._active_detections() else Origin.FUZZY
        explanation: List[Dict[str, Any]] = []
        for idx, strength in outcome.fired():
            rule = cfg.rules[idx]
            explanation.append({
                "rule": idx,
                "strength": round(strength, 6),
                "then": rule.consequent[1],
                "terms": [{"variable": v, "term": t, "degree": round(outcome.degrees[v][t], 6)}
                          for v, t in rule.antecedents],
            })
        explanation.append({"input": dict(zip(spec.predicates, vector.values)), "mu": outcome.mu})
        alert = Alert(
            alert_id=self._next_id(),
            thing_id=env.thing_id,
            origin=origin,
            ttp=ttp,
            severity=Severity.HIGH if risk is Band.HIGH else Severity.MEDIUM,
            raised_at_ms=self.now_ms,
            trigger_ts_ms=env.ts_ms,
            explanation=tuple(explanation),
            mu=round(outcome.mu, 6),
            band=risk,
            campaign=campaign,
            message=f"compromise score {outcome.mu:.2f} ({risk.value}) on {env.thing_id}",
        )
        return tag_csf(alert, self.csf_map)

    def _diagnostic(self, env: Envelope, error: Exception) -> Alert:
        alert = Alert(
            alert_id=self._next_id(),
            thing_id=env.thing_id,
            origin=Origin.DETERMINISTIC,
            ttp="ERROR",
            severity=Severity.ERROR,
            raised_at_ms=self.now_ms,
            trigger_ts_ms=env.ts_ms,
            explanation=({"error": type(error).__name__, "detail": str(error), "topic": str(env.topic)},),
            rule_id="engine_error",
            message=f"engine error while processing {env.topic}: {error}",
        )
        return tag_csf(alert, self.csf_map)

    def _dedup(self, alerts: List[Alert]) -> List[Alert]:
        kept = []
        for alert in alerts:
            key = (alert.thing_id, alert.ttp, alert.origin)
            last = self._last_raised.get(key)
            if last is not None and alert.raised_at_ms - last < self.dedup_ms:
                self.suppressed += 1
                continue
            self._last_raised[key] = alert.raised_at_ms
            kept.append(alert)
        return kept

    # -- entry points --

    def process(self, env: Envelope, published_ns: Optional[int] = None) -> List[Alert]:
        t_rules = time.monotonic_ns()
        t_src = published_ns if published_ns is not None and published_ns <= t_rules else t_rules
        self.now_ms = max(self.now_ms, env.ts_ms)
        campaign = self._campaign_for(env)
        alerts: List[Alert] = []
        try:
            self.registry.apply_update(env)
            firings = self._update_facts(env)
            alerts = self._deterministic_alerts(firings, env, campaign)
        except (ObservationError, FeatureExtractionError, DimensionError, ValueError, KeyError) as e:
            logger.error("engine error on %s: %s", env.topic, e)
            alerts = [self._diagnostic(env, e)]
        else:
            if self.mode is EngineMode.HYBRID:
                # a failed score never takes the crisp alerts with it
                try:
                    fuzzy = self._fuzzy_alert(env, campaign)
                except (FeatureExtractionError, DimensionError, ValueError, KeyError) as e:
                    logger.error("fuzzy stage failed on %s: %s", env.topic, e)
                    alerts.append(self._diagnostic(env, e))
                else:
                    if fuzzy is not None:
                        alerts.append(fuzzy)
        alerts = self._dedup(alerts)

        persisted = True
        if self.sink is not None:
            event = {"topic": str(env.topic), "seq": env.seq, "ts_ms": env.ts_ms,
                     "alerts": [a.alert_id for a in alerts]}
            try:
                self.sink.persist(event)
            except Exception as e:
                persisted = False
                self.persist_failures += 1
                logger.warning("persistence failed for %s: %s", env.topic, e)
        t_db = time.monotonic_ns()
        processing_ms = (t_db - t_rules) / 1e6
        alerts = [replace(a, processing_ms=processing_ms) for a in alerts]

        self.samples.append(LatencySample(str(env.topic.canonical()), env.channel.value, env.thing_id,
                                          t_src, t_rules, t_db, persisted))
        self.alerts.extend(alerts)
        self.processed += 1
        return alerts

    def pump(self, subscription: Subscription) -> List[Alert]:
        raised: List[Alert] = []
        for delivery in subscription.drain():
            raised.extend(self.process(delivery.envelope, delivery.published_ns))
        return raised


def process(pipeline: HybridPipeline, env: Envelope) -> List[Alert]:
    return pipeline.process(env)


# --- detection metrics -------------------------------------------------------

class DetectionStatus(str, Enum):
    DETECTED = "detected"
    MISSED = "missed"
    NOT_EXECUTED = "not_executed"


@dataclass(frozen=True)
class DetectionRecord:
    campaign: str
    ttp: str
    thing_id: str
    injection_ts_ms: int
    engine: EngineMode
    status: DetectionStatus
    first_alert_ts_ms: Optional[float] = None
    alert_id: Optional[str] = None
    origin: Optional[Origin] = None
    csf_tag: Optional[str] = None
    duplicates: int = 0

    @property
    def detection_time_ms(self) -> Optional[float]:
        if self.first_alert_ts_ms is None:
            return None
        return float(self.first_alert_ts_ms) - self.injection_ts_ms


@dataclass(frozen=True)
class DetectionResult:
    records: Tuple[DetectionRecord, ...]
    false_positives: Tuple[Alert, ...]

    @property
    def detected(self) -> int:
        return sum(1 for r in self.records if r.status is DetectionStatus.DETECTED)

    @property
    def executed(self) -> int:
        return sum(1 for r in self.records if r.status is not DetectionStatus.NOT_EXECUTED)


def detection_time(ground_truth: Sequence[InjectionLike], alerts: Sequence[Alert],
                   engine: EngineMode = EngineMode.DETERMINISTIC) -> DetectionResult:
    """Attach each alert to the latest earlier injection with the same thing and TTP."""
    firsts: Dict[int, Alert] = {}
    dupes: Counter = Counter()
    false_positives: List[Alert] = []
    executed = [(i, inj) for i, inj in enumerate(ground_truth) if inj.executed]
    for alert in sorted(alerts, key=lambda a: (a.raised_at_ms, a.alert_id)):
        if alert.severity is Severity.ERROR:
            continue
        candidates = [
            (inj.injection_ts_ms, i) for i, inj in executed
            if inj.ttp == alert.ttp and inj.thing_id == alert.thing_id
            and inj.injection_ts_ms <= alert.raised_at_ms
            and (alert.campaign is None or alert.campaign == inj.campaign)
        ]
        if not candidates:
            false_positives.append(alert)
            continue
        _, index = max(candidates)
        if index in firsts:
            dupes[index] += 1
        else:
            firsts[index] = alert

    records = []
    for i, inj in enumerate(ground_truth):
        if not inj.executed:
            status = DetectionStatus.NOT_EXECUTED
        elif i in firsts:
            status = DetectionStatus.DETECTED
        else:
            status = DetectionStatus.MISSED
        first = firsts.get(i)
        records.append(DetectionRecord(
            campaign=inj.campaign,
            ttp=inj.ttp,
            thing_id=inj.thing_id,
            injection_ts_ms=inj.injection_ts_ms,
            engine=engine,
            status=status,
            first_alert_ts_ms=first.raised_at_ms if first else None,
            alert_id=first.alert_id if first else None,
            origin=first.origin if first else None,
            csf_tag=first.csf_tag if first else None,
            duplicates=dupes[i],
        ))
    return DetectionResult(tuple(records), tuple(false_positives))


def improvement(t_durable_ms: float, t_hybrid_ms: float) -> float:
    if t_durable_ms <= 0:
        raise ValueError(f"baseline detection time must be > 0, got {t_durable_ms}")
    return round((t_durable_ms - t_hybrid_ms) / t_durable_ms * 100.0, 2)
