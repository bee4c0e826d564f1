"""Parsing of inbound payloads: topic-wrapped supply-chain event envelopes
(JSON) and delimited sensor readings (CSV).

Timestamps are RFC 3339 and get normalized to UTC on the way in.  Envelope
parsing is strict (malformed input raises), CSV parsing is row-tolerant: bad
rows are collected with a reason instead of aborting the file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional

from .ledger import canonical_bytes

OBJECT_EVENT = "ObjectEvent"
AGGREGATION_EVENT = "AggregationEvent"
TRANSFORMATION_EVENT = "TransformationEvent"
EVENT_TYPES = (OBJECT_EVENT, AGGREGATION_EVENT, TRANSFORMATION_EVENT)

ACTIONS = ("ADD", "OBSERVE", "DELETE")

KIND_TEMPERATURE = "temperature"
KIND_HUMIDITY = "humidity"
KIND_GPS = "gps"
SCALAR_KINDS = (KIND_TEMPERATURE, KIND_HUMIDITY)
READING_KINDS = SCALAR_KINDS + (KIND_GPS,)


class IngestError(Exception):
    """Base class for ingest failures."""


class MalformedJson(IngestError):
    pass


class MissingTopic(IngestError):
    pass


class UnknownEventType(IngestError):
    pass


class EventShapeMismatch(IngestError):
    pass


class MissingColumn(IngestError):
    pass


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime.

    Accepts 'Z' or a numeric offset; naive timestamps are rejected because
    the ledger, step identity and rule arithmetic all assume UTC.
    """
    if not isinstance(text, str) or not text:
        raise ValueError(f"not a timestamp: {text!r}")
    normalized = text.strip()
    if normalized.endswith(("Z", "z")):
        normalized = normalized[:-1] + "+00:00"
    try:
        stamp = datetime.fromisoformat(normalized)
    except ValueError as exc:
        raise ValueError(f"invalid RFC 3339 timestamp {text!r}") from exc
    if stamp.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no UTC offset")
    return stamp.astimezone(timezone.utc)


def format_rfc3339(stamp: datetime) -> str:
    """Render an aware datetime as RFC 3339 with a Z suffix."""
    if stamp.tzinfo is None:
        raise ValueError("naive datetime")
    return stamp.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass
class EpcisEvent:
    """One supply-chain event: who/what/when/where/why plus type-specific ids."""

    event_type: str
    event_time: datetime
    biz_step: str = ""
    biz_location: str = ""
    source_party: str = ""
    action: str = "OBSERVE"
    epc_list: list[str] = field(default_factory=list)
    parent_id: Optional[str] = None
    child_epcs: list[str] = field(default_factory=list)
    input_epcs: list[str] = field(default_factory=list)
    output_epcs: list[str] = field(default_factory=list)
    item_attributes: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        body: dict[str, Any] = {
            "type": self.event_type,
            "eventTime": format_rfc3339(self.event_time),
            "bizStep": self.biz_step,
            "bizLocation": self.biz_location,
            "sourceParty": self.source_party,
            "action": self.action,
        }
        if self.event_type == OBJECT_EVENT:
            body["epcList"] = list(self.epc_list)
        elif self.event_type == AGGREGATION_EVENT:
            body["parentID"] = self.parent_id
            body["childEPCs"] = list(self.child_epcs)
        else:
            body["inputEPCs"] = list(self.input_epcs)
            body["outputEPCs"] = list(self.output_epcs)
        if self.item_attributes:
            body["itemAttributes"] = dict(self.item_attributes)
        return body


@dataclass
class IngestEnvelope:
    """Topic-wrapped event as received from a stakeholder feed."""

    topic: str
    event: EpcisEvent

    def to_json(self) -> str:
        return json.dumps({"topic": self.topic, "event": self.event.to_dict()}, sort_keys=True)

    def fingerprint(self) -> str:
        """Identity hash over the canonical envelope body, for idempotent apply."""
        return hashlib.sha256(
            canonical_bytes({"topic": self.topic, "event": self.event.to_dict()})
        ).hexdigest()


@dataclass
class RawReading:
    """One sensor sample; value is a 1-tuple for scalars, (lat, lon) for GPS."""

    device_id: str
    timestamp: datetime
    kind: str
    value: tuple[float, ...]


@dataclass
class TriggerDecision:
    """What the engine should do after applying an event."""

    action: str  # "none" | "auto-verify"
    step_ref: Optional[str] = None


def _require_string_list(body: dict, key: str, event_type: str) -> list[str]:
    value = body.get(key)
    if not isinstance(value, list) or not value or not all(isinstance(x, str) and x for x in value):
        raise EventShapeMismatch(f"{event_type} requires non-empty string list {key!r}")
    return list(value)


def _parse_item_attributes(raw: Any) -> dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise EventShapeMismatch("itemAttributes must be an object")
    parsed: dict[str, Any] = {}
    for key, value in raw.items():
        if not isinstance(key, str) or not key:
            raise EventShapeMismatch("itemAttributes keys must be non-empty strings")
        # Numeric claims become reals so tolerance comparison works; anything
        # else is kept verbatim as a string.
        if isinstance(value, bool):
            parsed[key] = str(value)
        elif isinstance(value, (int, float)):
            parsed[key] = float(value)
        else:
            parsed[key] = str(value)
    return parsed


def parse_event(body: Any) -> EpcisEvent:
    """Validate and convert a decoded event object."""
    if not isinstance(body, dict):
        raise EventShapeMismatch("event must be a JSON object")
    event_type = body.get("type")
    if event_type not in EVENT_TYPES:
        raise UnknownEventType(f"unknown event type {event_type!r}")
    try:
        event_time = parse_rfc3339(body.get("eventTime", ""))
    except ValueError as exc:
        raise EventShapeMismatch(str(exc)) from exc
    action = body.get("action", "OBSERVE")
    if action not in ACTIONS:
        raise EventShapeMismatch(f"action must be one of {ACTIONS}, got {action!r}")
    for key in ("bizStep", "bizLocation", "sourceParty"):
        if key in body and not isinstance(body[key], str):
            raise EventShapeMismatch(f"{key} must be a string")

    event = EpcisEvent(
        event_type=event_type,
        event_time=event_time,
        biz_step=body.get("bizStep", ""),
        biz_location=body.get("bizLocation", ""),
        source_party=body.get("sourceParty", ""),
        action=action,
        item_attributes=_parse_item_attributes(body.get("itemAttributes")),
    )
    if event_type == OBJECT_EVENT:
        event.epc_list = _require_string_list(body, "epcList", event_type)
    elif event_type == AGGREGATION_EVENT:
        parent = body.get("parentID")
        if not isinstance(parent, str) or not parent:
            raise EventShapeMismatch("AggregationEvent requires parentID")
        event.parent_id = parent
        event.child_epcs = _require_string_list(body, "childEPCs", event_type)
    else:
        event.input_epcs = _require_string_list(body, "inputEPCs", event_type)
        event.output_epcs = _require_string_list(body, "outputEPCs", event_type)
    return event


def parse_envelope(text: str | bytes) -> IngestEnvelope:
    """Parse one topic-wrapped event envelope from JSON text."""
    try:
        decoded = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc}") from exc
    if not isinstance(decoded, dict):
        raise MalformedJson("envelope must be a JSON object")
    topic = decoded.get("topic")
    if not isinstance(topic, str) or not topic:
        raise MissingTopic("envelope has no topic")
    if "event" not in decoded:
        raise EventShapeMismatch("envelope has no event object")
    return IngestEnvelope(topic=topic, event=parse_event(decoded["event"]))


@dataclass
class RejectedRow:
    """CSV row that failed validation, kept for the ingest summary."""

    line_number: int
    reason: str
    raw: dict[str, str] = field(default_factory=dict)


def parse_sensor_csv(text: str, kind: str) -> tuple[list[RawReading], list[RejectedRow]]:
    """Parse a sensor CSV of the given reading kind.

    Scalar kinds use columns device_id,timestamp,value; GPS uses
    device_id,timestamp,lat,lon.  A missing header column aborts with
    MissingColumn; bad rows are skipped and reported.
    """
    if kind not in READING_KINDS:
        raise ValueError(f"unknown reading kind {kind!r}")
    value_columns = ("lat", "lon") if kind == KIND_GPS else ("value",)
    required = ("device_id", "timestamp") + value_columns

    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for column in required:
        if column not in header:
            raise MissingColumn(f"CSV is missing required column {column!r}")

    readings: list[RawReading] = []
    rejects: list[RejectedRow] = []
    for line_number, row in enumerate(reader, start=2):
        device = (row.get("device_id") or "").strip()
        if not device:
            rejects.append(RejectedRow(line_number, "empty device_id", row))
            continue
        try:
            stamp = parse_rfc3339((row.get("timestamp") or "").strip())
        except ValueError as exc:
            rejects.append(RejectedRow(line_number, str(exc), row))
            continue
        try:
            value = tuple(float((row.get(col) or "").strip()) for col in value_columns)
        except ValueError:
            rejects.append(RejectedRow(line_number, "non-numeric value", row))
            continue
        if kind == KIND_GPS:
            lat, lon = value
            if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
                rejects.append(RejectedRow(line_number, "coordinates out of range", row))
                continue
        readings.append(RawReading(device, stamp, kind, value))
    return readings, rejects


DEFAULT_TRIGGER_STEPS = frozenset({"receiving"})


def classify_trigger(
    event: EpcisEvent,
    trigger_steps: frozenset[str] = DEFAULT_TRIGGER_STEPS,
    step_ref: Optional[str] = None,
) -> TriggerDecision:
    """Decide whether an applied event should kick off automatic verification.

    Only object events whose bizStep is in the configured trigger set qualify;
    step_ref is the step the event closed, threaded through for the caller.
    """
    if event.event_type == OBJECT_EVENT and event.biz_step in trigger_steps:
        return TriggerDecision(action="auto-verify", step_ref=step_ref)
    return TriggerDecision(action="none")
