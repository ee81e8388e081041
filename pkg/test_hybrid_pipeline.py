import itertools
import logging
import os

import pytest

from config import DATA_DIR
from fuzzy_engine import Band, FuzzyConfigError, load_fuzzy_config
from hybrid_pipeline import (
    Alert,
    CsfMap,
    DEFAULT_CSF_MAP,
    DetectionStatus,
    EngineMode,
    HybridPipeline,
    Origin,
    UNMAPPED,
    detection_time,
    improvement,
    load_csf_map,
    tag_csf,
)
from message_bus import Bus, Channel, Envelope, Payload, Topic
from rete_engine import Severity, load_rules
from scenario_injector import EventKind, GroundTruthEntry
from semantic_model import FeatureEntry, FeatureSpec, load_feature_spec

LIGHT = "04-cd-15-ff-fe-c8-aa-6e-01"
LIGHT2 = "04-cd-15-ff-fe-c8-c0-12-01"
SENSOR = "00-15-8d-00-05-48-e4-7c-01-0006"
ATTRS = {"modelid": "TRADFRIbulbE27WSglobeopal1055lm", "swversion": "1.0.012"}

_seq = itertools.count(1)


def _pipeline(mode=EngineMode.DETERMINISTIC, **kwargs):
    return HybridPipeline(
        load_rules(os.path.join(DATA_DIR, "rules.json")),
        load_fuzzy_config(os.path.join(DATA_DIR, "fuzzy.json")),
        load_feature_spec(os.path.join(DATA_DIR, "feature_spec.json")),
        mode,
        load_csf_map(os.path.join(DATA_DIR, "csf_tags.json")),
        **kwargs,
    )


def _live(ts, thing=LIGHT, attributes=None, campaign=None, **features):
    base = {"state.on": True, "state.bri": 180, "network.traffic_rate": 40.0, "firmware.integrity": 1.0}
    base.update(features)
    return Envelope(Topic.live(thing), thing, next(_seq), ts, Payload(dict(attributes or ATTRS), base), campaign)


def _twin(ts, thing=LIGHT, **features):
    return Envelope(Topic.twin(thing), thing, next(_seq), ts, Payload({}, features))


def _command(source, path="state.on", value=False):
    return {"command.source": source, "command.path": path, "command.value": value, "command.count": 1}


def test_unauthorized_remote_access_alert():
    p = _pipeline()
    p.process(_live(1000))
    alerts = p.process(_live(2000, campaign="C0012", **_command("eng-ws-07")))
    assert len(alerts) == 1
    alert = alerts[0]
    assert (alert.ttp, alert.origin, alert.rule_id) == ("T1021.002", Origin.DETERMINISTIC, "R1_unauthorized_remote_access")
    assert alert.campaign == "C0012"
    assert alert.csf_tag == "DE.DP-5"
    assert alert.thing_id == LIGHT
    assert "eng-ws-07" in alert.message
    assert alert.raised_at_ms == 2000


def test_allowlisted_commands_are_quiet():
    p = _pipeline()
    assert p.process(_live(1000, **_command("operator-1"))) == []
    assert p.process(_live(2000, **_command("scheduler", "state.bri", 20))) == []


def test_malicious_command_from_unknown_source():
    p = _pipeline()
    alerts = p.process(_live(1000, **_command("10.0.8.66", "state.bri", 20)))
    by_ttp = {a.ttp: a for a in alerts}
    assert set(by_ttp) == {"T1059", "T1021.002"}
    assert by_ttp["T1059"].severity is Severity.CRITICAL


def test_unknown_source_is_flagged_whatever_the_path():
    p = _pipeline()
    alerts = p.process(_live(1000, **_command("attacker-99", "provisioning", True)))
    assert [(a.ttp, a.rule_id) for a in alerts] == [("T1021.002", "R1_unauthorized_remote_access")]
    p.process(_live(2000, provisioning=True))
    # provisioning set by that source does not hide its later writes
    later = p.process(_live(8000, provisioning=True, **_command("attacker-99", "state.on", False)))
    assert "T1021.002" in {a.ttp for a in later}


def test_config_tamper_only_outside_provisioning():
    p = _pipeline()
    assert p.process(_live(1000, attributes={**ATTRS, "swversion": "A"}, provisioning=True)) == []
    assert p.process(_live(2000, attributes={**ATTRS, "swversion": "B"}, provisioning=True)) == []
    assert p.process(_live(3000, attributes={**ATTRS, "swversion": "B"})) == []
    alerts = p.process(_live(4000, attributes={**ATTRS, "swversion": "1.88.9-mod"}))
    assert [a.ttp for a in alerts] == ["T1112"]


def test_twin_spoof_raises_one_mismatch_alert_after_grace():
    p = _pipeline()
    assert p.process(_live(1000, **{"state.on": False})) == []
    assert p.process(_twin(1000, **{"state.on": True})) == []
    alerts = p.process(_live(2000, **{"state.on": False}))
    assert [(a.ttp, a.rule_id) for a in alerts] == [("T0850", "R5_twin_state_spoofing")]
    assert p.process(_live(3000, **{"state.on": False})) == []
    assert p.process(_live(9000, **{"state.on": False})) == []


def test_logical_physical_mismatch_needs_persisted_off():
    p = _pipeline()
    sensor = {"state.lux": 50, "state.presence": True}
    assert p.process(_live(0, thing=SENSOR, attributes={"saref.type": "Sensor"}, **sensor)) == []
    assert p.process(_live(0, **{"state.on": False})) == []
    assert p.process(_live(1000, **{"state.on": False})) == []
    alerts = p.process(_live(2500, **{"state.on": False}))
    assert [(a.ttp, a.thing_id) for a in alerts] == [("T0850", LIGHT)]


def test_duplicate_alerts_are_suppressed_within_window():
    p = _pipeline(dedup_ms=5000)
    assert len(p.process(_live(1000, **_command("eng-ws-07")))) == 1
    p.process(_live(2000))
    assert p.process(_live(3000, **_command("eng-ws-07"))) == []
    assert p.suppressed == 1
    p.process(_live(4000))
    assert len(p.process(_live(7000, **_command("eng-ws-07")))) == 1


def test_hybrid_mode_adds_fuzzy_alert_with_band():
    p = _pipeline(EngineMode.HYBRID)
    p.process(_live(1000))
    alerts = p.process(_live(2000, **{"network.traffic_rate": 950.0}))
    by_origin = {a.origin: a for a in alerts}
    assert by_origin[Origin.DETERMINISTIC].ttp == "T1041"
    fuzzy = by_origin[Origin.HYBRID]
    assert fuzzy.ttp == "T1041"
    assert fuzzy.band is Band.HIGH and fuzzy.severity is Severity.HIGH
    assert fuzzy.mu >= 0.5
    assert fuzzy.csf_tag == "RS.RP-1"
    assert any("strength" in step for step in fuzzy.explanation)
    assert p.band_counts["low"] == 1 and p.band_counts["high"] == 1


def test_fuzzy_only_detection_before_rules_cross():
    p = _pipeline(EngineMode.HYBRID)
    alerts = p.process(_live(1000, **{"network.traffic_rate": 700.0, "firmware.integrity": 0.55}))
    assert [a.origin for a in alerts] == [Origin.FUZZY]
    assert alerts[0].band in (Band.MED, Band.HIGH)


def test_deterministic_mode_has_no_fuzzy_output():
    p = _pipeline()
    alerts = p.process(_live(1000, **{"network.traffic_rate": 950.0}))
    assert {a.origin for a in alerts} == {Origin.DETERMINISTIC}
    assert not p.band_counts


def test_hybrid_mode_requires_aligned_fuzzy_config():
    rules = load_rules(os.path.join(DATA_DIR, "rules.json"))
    with pytest.raises(FuzzyConfigError):
        HybridPipeline(rules, mode=EngineMode.HYBRID)
    spec = FeatureSpec((FeatureEntry("network.traffic_rate", 0.0, 1000.0, 0.0),))
    with pytest.raises(FuzzyConfigError, match="inputs"):
        HybridPipeline(rules, load_fuzzy_config(os.path.join(DATA_DIR, "fuzzy.json")), spec, EngineMode.HYBRID)


def test_engine_error_becomes_diagnostic_alert():
    p = _pipeline(EngineMode.HYBRID)
    alerts = p.process(_live(1000, **{"network.traffic_rate": "fast"}))
    assert len(alerts) == 1
    assert alerts[0].severity is Severity.ERROR and alerts[0].ttp == "ERROR"
    assert alerts[0].rule_id == "engine_error"
    # the pipeline keeps going
    assert p.process(_live(2000)) == []


def test_fuzzy_failure_keeps_deterministic_alerts():
    features = {"network.traffic_rate": "n/a", **_command("eng-ws-07")}
    rules_only = _pipeline().process(_live(1000, **features))
    hybrid = _pipeline(EngineMode.HYBRID).process(_live(1000, **features))
    assert {a.ttp for a in rules_only} == {"T1021.002"}
    assert {a.ttp for a in hybrid} == {"T1021.002", "ERROR"}
    assert {(a.thing_id, a.ttp) for a in rules_only} <= {(a.thing_id, a.ttp) for a in hybrid}


class _MemorySink:
    def __init__(self, fail_every=0):
        self.events = []
        self.fail_every = fail_every

    def persist(self, event):
        self.events.append(event)
        if self.fail_every and len(self.events) % self.fail_every == 0:
            raise OSError("disk full")
        return 0.1


def test_latency_samples_decompose_exactly():
    sink = _MemorySink(fail_every=3)
    p = _pipeline(sink=sink)
    bus = Bus()
    sub = bus.subscribe("#")
    for i in range(6):
        bus.publish(_live(1000 * (i + 1)))
    p.pump(sub)
    assert p.processed == 6 and len(p.samples) == 6
    for s in p.samples:
        d = s.deltas
        assert s.t_src_ns <= s.t_rules_ns <= s.t_db_ns
        assert d.d_end_ns == d.d_ingest_ns + d.d_rules_db_ns
        assert s.channel == Channel.LIVE.value
    assert p.persist_failures == 2
    assert [s.persisted for s in p.samples].count(False) == 2
    assert sink.events[0]["topic"] == f"live/{LIGHT}/state"


def test_csf_tag_precedence_and_unmapped_origin(caplog):
    csf = CsfMap({"deterministic": "DE.DP-5"}, {"R9": "PR.DS-6"}, {})
    alert = Alert("A1", LIGHT, Origin.DETERMINISTIC, "T0857", Severity.HIGH, 0, 0, (), rule_id="R9")
    assert tag_csf(alert, csf, rule_csf="DE.CM-1").csf_tag == "PR.DS-6"
    other = Alert("A2", LIGHT, Origin.DETERMINISTIC, "T0857", Severity.HIGH, 0, 0, (), rule_id="R8")
    assert tag_csf(other, csf, rule_csf="DE.CM-1").csf_tag == "DE.CM-1"
    assert tag_csf(other, csf).csf_tag == "DE.DP-5"
    with caplog.at_level(logging.WARNING):
        fuzzy = Alert("A3", LIGHT, Origin.FUZZY, "T1041", Severity.HIGH, 0, 0, ())
        assert tag_csf(fuzzy, csf).csf_tag == UNMAPPED
    assert "no CSF tag" in caplog.text
    assert DEFAULT_CSF_MAP.describe("RS.RP-1")


def test_engine_mode_parse_accepts_legacy_name():
    assert EngineMode.parse("deterministic_only") is EngineMode.DETERMINISTIC
    assert EngineMode.parse("hybrid") is EngineMode.HYBRID
    with pytest.raises(ValueError):
        EngineMode.parse("neural")


# --- detection accounting ----------------------------------------------------

def _alert(alert_id, ttp, thing, at, origin=Origin.DETERMINISTIC, severity=Severity.HIGH, campaign=None):
    return Alert(alert_id, thing, origin, ttp, severity, at, at, (), campaign=campaign, csf_tag="DE.DP-5")


def test_detection_time_pairs_alerts_with_injections():
    truth = [
        GroundTruthEntry("C0012", "T1021.002", LIGHT, 10_000, EventKind.UNAUTHORIZED_COMMAND),
        GroundTruthEntry("C0012", "T1059", LIGHT2, 30_000, EventKind.UNAUTHORIZED_COMMAND),
        GroundTruthEntry("C0012", "T1112", "gone", 50_000, EventKind.CONFIG_TAMPER, executed=False),
    ]
    alerts = [
        _alert("A1", "T1021.002", LIGHT, 11_000),
        _alert("A2", "T1021.002", LIGHT, 12_000),
        _alert("A3", "T1041", SENSOR, 20_000),
        _alert("A4", "ERROR", LIGHT2, 30_500, severity=Severity.ERROR),
        _alert("A5", "T1059", LIGHT2, 29_000),
        _alert("A6", "T1059", LIGHT2, 31_000, campaign="C0020"),
    ]
    result = detection_time(truth, alerts, EngineMode.DETERMINISTIC)
    first, second, third = result.records
    assert first.status is DetectionStatus.DETECTED
    assert first.detection_time_ms == 1000 and first.duplicates == 1 and first.alert_id == "A1"
    assert second.status is DetectionStatus.MISSED
    assert third.status is DetectionStatus.NOT_EXECUTED and third.detection_time_ms is None
    assert {a.alert_id for a in result.false_positives} == {"A3", "A5", "A6"}
    assert result.detected == 1 and result.executed == 2


def test_detection_time_latest_injection_wins():
    truth = [
        GroundTruthEntry("C0028", "T1071", LIGHT, 1000, EventKind.C2_TOGGLE_TRAIN),
        GroundTruthEntry("C0028", "T1071", LIGHT, 5000, EventKind.C2_TOGGLE_TRAIN),
    ]
    result = detection_time(truth, [_alert("A1", "T1071", LIGHT, 6000)])
    assert [r.status for r in result.records] == [DetectionStatus.MISSED, DetectionStatus.DETECTED]
    assert result.records[1].detection_time_ms == 1000


def test_detection_time_keeps_fractional_milliseconds():
    truth = [GroundTruthEntry("C0012", "T1021.002", LIGHT, 1000, EventKind.UNAUTHORIZED_COMMAND)]
    stored = _alert("A1", "T1021.002", LIGHT, 1045.67).to_dict()
    record = detection_time(truth, [Alert.from_dict(stored)]).records[0]
    assert record.detection_time_ms == pytest.approx(45.67)
    assert Alert.from_dict(_alert("A2", "T1059", LIGHT, 2000).to_dict()).raised_at_ms == 2000


def test_improvement_formula():
    assert improvement(45.67, 38.12) == 16.53
    assert improvement(52.34, 41.08) == 21.51
    assert improvement(40.0, 40.0) == 0.0
    assert abs(improvement(45.67, 38.12) - 16.52) <= 0.1
    with pytest.raises(ValueError):
        improvement(0.0, 10.0)
