import itertools

import pytest
from hypothesis import given, strategies as st

from semantic_model import (
    DEFAULT_FEATURE_SPEC,
    DeltaStatus,
    DeviceObservation,
    FactBase,
    FactKind,
    FeatureEntry,
    FeatureExtractionError,
    FeatureSpec,
    ObservationError,
    SemanticFact,
    assert_fact,
    feature_vector,
    flatten_features,
    lift,
    query,
    same_value,
    unflatten_features,
)

THING = "04-cd-15-ff-fe-c8-aa-6e-01"


def _fact(fid, predicate, value, ts, thing=THING):
    return SemanticFact(fid, thing, predicate, value, ts)


def test_lift_emits_one_fact_per_attribute_and_feature():
    obs = DeviceObservation(
        THING,
        {"saref.type": "LightingDevice", "modelid": "LCT015"},
        {"state.on": True, "state.bri": 180, "network.traffic_rate": 41.5},
        10_000,
    )
    facts = lift(obs, itertools.count(1))
    assert len(facts) == 5
    assert [f.fact_id for f in facts] == [1, 2, 3, 4, 5]
    kinds = {f.predicate: f.kind for f in facts}
    assert kinds["modelid"] is FactKind.STATIC_ATTRIBUTE
    assert kinds["state.bri"] is FactKind.DYNAMIC_PROPERTY
    assert all(f.ts_ms == 10_000 and f.thing_id == THING for f in facts)


@pytest.mark.parametrize("features", [
    {"state..on": True},
    {"State.On": True},
    {"": 1},
    {"state.on": [1, 2]},
])
def test_lift_rejects_malformed_observations(features):
    with pytest.raises(ObservationError):
        lift(DeviceObservation(THING, {}, features, 0))


def test_lift_rejects_empty_thing_and_negative_ts():
    with pytest.raises(ObservationError):
        lift(DeviceObservation("", {}, {"state.on": True}, 0))
    with pytest.raises(ObservationError, match="ts_ms"):
        lift(DeviceObservation(THING, {}, {"state.on": True}, -1))


def test_flatten_and_unflatten_nested_features():
    flat = flatten_features({"state": {"on": True, "bri": 200}, "network": {"traffic_rate": 3.5}})
    assert flat == {"state.on": True, "state.bri": 200, "network.traffic_rate": 3.5}
    assert unflatten_features(flat) == {"state": {"on": True, "bri": 200}, "network": {"traffic_rate": 3.5}}
    with pytest.raises(ObservationError):
        flatten_features({"state": {"on": None}})


def test_assert_fact_last_writer_wins_by_timestamp():
    fb = FactBase()
    assert assert_fact(fb, _fact(1, "state.bri", 100, 1000)).status is DeltaStatus.INSERTED
    delta = assert_fact(fb, _fact(2, "state.bri", 120, 2000))
    assert delta.status is DeltaStatus.REPLACED
    assert delta.old.value == 100 and delta.value_changed

    stale = assert_fact(fb, _fact(3, "state.bri", 90, 1500))
    assert stale.status is DeltaStatus.IGNORED_STALE
    assert fb.get(THING, "state.bri").value == 120

    # equal timestamp replaces
    same_ts = assert_fact(fb, _fact(4, "state.bri", 120, 2000))
    assert same_ts.status is DeltaStatus.REPLACED
    assert not same_ts.value_changed
    assert len(fb) == 1


def test_query_filters_and_sorts():
    fb = FactBase()
    fb.assert_fact(_fact(1, "state.on", True, 10))
    fb.assert_fact(_fact(2, "state.bri", 10, 10))
    fb.assert_fact(_fact(3, "state.lux", 150.0, 10, thing="sensor-1"))
    assert [f.predicate for f in query(fb, thing_id=THING)] == ["state.bri", "state.on"]
    assert [f.thing_id for f in query(fb, predicate="state.lux")] == ["sensor-1"]
    assert query(fb, thing_id="nope") == []
    assert fb.things() == sorted([THING, "sensor-1"])
    assert fb.retract(THING, "state.on").value is True
    assert fb.retract(THING, "state.on") is None


def test_same_value_keeps_types_apart():
    assert same_value(1, 1.0)
    assert not same_value(True, 1)
    assert not same_value("1", 1)
    assert same_value("a", "a")


def test_feature_vector_normalizes_and_defaults():
    fb = FactBase()
    fb.assert_fact(_fact(1, "network.traffic_rate", 500.0, 100))
    fb.assert_fact(_fact(2, "state.bri", 508, 200))
    vec = feature_vector(fb, DEFAULT_FEATURE_SPEC, THING)
    assert vec.values[0] == pytest.approx(0.5)
    assert vec.values[1] == 1.0  # clamped
    assert vec.values[2] == 0.0  # missing lux uses default 0
    assert vec.values[3] == pytest.approx(0.5)  # default 20 C in (-10, 50)
    assert vec.ts_ms == 200
    assert len(vec) == DEFAULT_FEATURE_SPEC.dimension


def test_feature_vector_booleans_and_strings():
    spec = FeatureSpec((FeatureEntry("state.on", 0.0, 1.0, 0.0),))
    fb = FactBase()
    fb.assert_fact(_fact(1, "state.on", True, 1))
    assert feature_vector(fb, spec, THING).values == (1.0,)
    fb.assert_fact(_fact(2, "state.on", "yes", 2))
    with pytest.raises(FeatureExtractionError, match="state.on"):
        feature_vector(fb, spec, THING)


def test_feature_spec_rejects_bad_ranges():
    with pytest.raises(FeatureExtractionError):
        FeatureSpec((FeatureEntry("x", 1.0, 1.0, 1.0),))
    with pytest.raises(FeatureExtractionError):
        FeatureSpec((FeatureEntry("x", 0.0, 1.0, 2.0),))


@given(st.lists(st.tuples(st.sampled_from(["a.x", "a.y", "b.z"]), st.integers(0, 50), st.integers(0, 1000)),
                max_size=40))
def test_fact_base_holds_newest_value_per_key(writes):
    fb = FactBase()
    newest = {}
    for i, (pred, ts, value) in enumerate(writes):
        fb.assert_fact(_fact(i + 1, pred, value, ts))
        if pred not in newest or ts >= newest[pred][0]:
            newest[pred] = (ts, value)
    assert {f.predicate: (f.ts_ms, f.value) for f in fb} == newest


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_normalized_features_stay_in_unit_interval(value):
    entry = FeatureEntry("network.traffic_rate", 0.0, 1000.0, 0.0)
    assert 0.0 <= entry.normalize(value) <= 1.0
