"""Envelope and sensor-CSV parsing."""

from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veritrail.ingest import (
    DEFAULT_TRIGGER_STEPS,
    EventShapeMismatch,
    MalformedJson,
    MissingColumn,
    MissingTopic,
    UnknownEventType,
    classify_trigger,
    format_rfc3339,
    parse_envelope,
    parse_event,
    parse_rfc3339,
    parse_sensor_csv,
)


# -- timestamps ----------------------------------------------------------


def test_offset_timestamps_normalize_to_utc():
    stamp = parse_rfc3339("2024-07-07T12:00:00+02:00")
    assert stamp == datetime(2024, 7, 7, 10, 0, tzinfo=timezone.utc)
    assert format_rfc3339(stamp) == "2024-07-07T10:00:00Z"


def test_z_suffix_accepted():
    assert parse_rfc3339("2024-07-07T10:00:00Z").hour == 10


def test_naive_timestamp_rejected():
    with pytest.raises(ValueError):
        parse_rfc3339("2024-07-07T10:00:00")


# -- envelopes -----------------------------------------------------------

GOOD = """{"topic": "producer", "event": {"type": "ObjectEvent",
"eventTime": "2024-07-07T10:00:00Z", "bizStep": "shipping",
"bizLocation": "plant-1", "action": "ADD", "epcList": ["lot-1"],
"itemAttributes": {"weightKg": 1000, "organic": true, "variety": "Cherry-A"}}}"""


def test_parse_envelope_happy_path():
    env = parse_envelope(GOOD)
    assert env.topic == "producer"
    assert env.event.event_type == "ObjectEvent"
    assert env.event.epc_list == ["lot-1"]
    # numeric claims become floats, booleans and text become strings
    assert env.event.item_attributes == {
        "weightKg": 1000.0,
        "organic": "True",
        "variety": "Cherry-A",
    }


def test_fingerprint_ignores_input_key_order():
    shuffled = """{"event": {"epcList": ["lot-1"], "action": "ADD",
"bizLocation": "plant-1", "bizStep": "shipping",
"eventTime": "2024-07-07T12:00:00+02:00", "type": "ObjectEvent",
"itemAttributes": {"variety": "Cherry-A", "organic": true, "weightKg": 1000}},
"topic": "producer"}"""
    assert parse_envelope(GOOD).fingerprint() == parse_envelope(shuffled).fingerprint()


def test_fingerprint_differs_per_topic():
    other = GOOD.replace('"topic": "producer"', '"topic": "carrier"')
    assert parse_envelope(GOOD).fingerprint() != parse_envelope(other).fingerprint()


def test_malformed_json_rejected():
    with pytest.raises(MalformedJson):
        parse_envelope("{not json")


def test_missing_topic_rejected():
    with pytest.raises(MissingTopic):
        parse_envelope('{"event": {"type": "ObjectEvent"}}')


def test_unknown_event_type_rejected():
    with pytest.raises(UnknownEventType):
        parse_event({"type": "QuantityEvent", "eventTime": "2024-07-07T10:00:00Z"})


def test_object_event_requires_epc_list():
    with pytest.raises(EventShapeMismatch):
        parse_event({"type": "ObjectEvent", "eventTime": "2024-07-07T10:00:00Z"})


def test_aggregation_event_requires_parent_and_children():
    body = {
        "type": "AggregationEvent",
        "eventTime": "2024-07-07T10:00:00Z",
        "parentID": "pallet-1",
        "childEPCs": ["lot-1", "lot-2"],
    }
    event = parse_event(body)
    assert event.parent_id == "pallet-1"
    assert event.child_epcs == ["lot-1", "lot-2"]
    with pytest.raises(EventShapeMismatch):
        parse_event({**body, "childEPCs": []})


def test_transformation_event_ids():
    event = parse_event(
        {
            "type": "TransformationEvent",
            "eventTime": "2024-07-07T10:00:00Z",
            "inputEPCs": ["lot-raw"],
            "outputEPCs": ["lot-cooked"],
        }
    )
    assert event.input_epcs == ["lot-raw"]
    assert event.output_epcs == ["lot-cooked"]


def test_bad_action_rejected():
    with pytest.raises(EventShapeMismatch):
        parse_event(
            {
                "type": "ObjectEvent",
                "eventTime": "2024-07-07T10:00:00Z",
                "action": "DESTROY",
                "epcList": ["x"],
            }
        )


def test_to_json_round_trips_through_parse():
    env = parse_envelope(GOOD)
    again = parse_envelope(env.to_json())
    assert again == env
    assert again.fingerprint() == env.fingerprint()


# -- sensor CSV ----------------------------------------------------------


def test_scalar_csv_happy_and_rejects_with_line_numbers():
    text = (
        "device_id,timestamp,value\n"
        "dev-7,2024-07-07T10:00:00Z,3.2\n"
        ",2024-07-07T10:01:00Z,3.3\n"
        "dev-7,not-a-time,3.4\n"
        "dev-7,2024-07-07T10:03:00Z,warm\n"
        "dev-7,2024-07-07T10:04:00+00:00,4.0\n"
    )
    readings, rejects = parse_sensor_csv(text, "temperature")
    assert [r.value for r in readings] == [(3.2,), (4.0,)]
    assert readings[0].device_id == "dev-7"
    assert readings[0].kind == "temperature"
    # header is line 1; rejects carry the physical line number
    assert [(r.line_number, r.reason) for r in rejects] == [
        (3, "empty device_id"),
        (4, "invalid RFC 3339 timestamp 'not-a-time'"),
        (5, "non-numeric value"),
    ]


def test_gps_csv_and_range_check():
    text = (
        "device_id,timestamp,lat,lon\n"
        "gps-1,2024-07-07T10:00:00Z,40.137,-7.501\n"
        "gps-1,2024-07-07T10:00:30Z,95.0,-7.5\n"
        "gps-1,2024-07-07T10:01:00Z,40.2,181.0\n"
    )
    readings, rejects = parse_sensor_csv(text, "gps")
    assert [r.value for r in readings] == [(40.137, -7.501)]
    assert [r.reason for r in rejects] == ["coordinates out of range"] * 2


def test_missing_column_aborts():
    with pytest.raises(MissingColumn):
        parse_sensor_csv("device_id,timestamp\napp,2024-07-07T10:00:00Z\n", "temperature")
    with pytest.raises(MissingColumn):
        parse_sensor_csv("device_id,timestamp,value\nx,2024-07-07T10:00:00Z,1\n", "gps")


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        parse_sensor_csv("device_id,timestamp,value\n", "pressure")


# -- trigger classification ----------------------------------------------


def _object_event(biz_step):
    return parse_event(
        {
            "type": "ObjectEvent",
            "eventTime": "2024-07-07T10:00:00Z",
            "bizStep": biz_step,
            "epcList": ["lot-1"],
        }
    )


def test_receiving_triggers_auto_verify():
    decision = classify_trigger(_object_event("receiving"), step_ref="step-9")
    assert decision.action == "auto-verify"
    assert decision.step_ref == "step-9"


def test_other_steps_do_not_trigger():
    assert classify_trigger(_object_event("shipping")).action == "none"
    assert "receiving" in DEFAULT_TRIGGER_STEPS


def test_custom_trigger_set():
    decision = classify_trigger(_object_event("delivering"), frozenset({"delivering"}))
    assert decision.action == "auto-verify"


# -- properties ----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(
    st.datetimes(
        min_value=datetime(2000, 1, 1),
        max_value=datetime(2100, 1, 1),
    ),
    st.integers(min_value=-14 * 60, max_value=14 * 60),
)
def test_format_parse_round_trip_is_identity_on_utc(naive, offset_min):
    from datetime import timedelta

    stamp = naive.replace(tzinfo=timezone(timedelta(minutes=offset_min)))
    assert parse_rfc3339(format_rfc3339(stamp)) == stamp.astimezone(timezone.utc)
