"""Domain object model on top of the ledger: journeys, steps, points, claims,
policies and verification records.

The StateStore owns the key layout and every read/write path.  Applying an
event is a single ledger transaction covering all the state it touches, with
an identity marker keyed by the envelope hash so replays become no-ops.
Aggregation and transformation links form a DAG over journeys; link writes
refuse to create cycles.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from typing import Any, Iterable, Optional

import jsonschema

from . import rules
from .ingest import (
    AGGREGATION_EVENT,
    OBJECT_EVENT,
    IngestEnvelope,
    RawReading,
    format_rfc3339,
    parse_rfc3339,
)
from .ledger import (
    SimulatedLedger,
    Transaction,
    TransactionRecord,
    canonical_bytes,
    encode_composite_key,
    prefix_of,
)

MODES = ("SSoD", "MSoD", "DSoD")
STEP_OPEN = "open"
STEP_CLOSED = "closed"
WILDCARD_PRODUCT = "*"

DEFAULT_CLOSING_PHASES = frozenset({"receiving", "delivering"})


class ModelError(Exception):
    pass


class SchemaViolation(ModelError):
    """Policy document fails validation; path points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnknownJourneyReference(ModelError):
    pass


class UnknownStep(ModelError):
    pass


class DuplicatePoint(ModelError):
    pass


class CycleDetected(ModelError):
    pass


# -- records ---------------------------------------------------------------


def _event_ref_to_dict(ref: Optional[dict]) -> Optional[dict]:
    return dict(ref) if ref else None


@dataclass
class Step:
    """One phase of a journey, bounded by its opening and closing events."""

    step_id: str
    journey_id: str
    phase: str
    location: str
    status: str = STEP_OPEN
    start_event: Optional[dict] = None  # {"time", "bizLocation", "eventId"}
    end_event: Optional[dict] = None

    @property
    def start_time(self) -> Optional[datetime]:
        return parse_rfc3339(self.start_event["time"]) if self.start_event else None

    @property
    def end_time(self) -> Optional[datetime]:
        return parse_rfc3339(self.end_event["time"]) if self.end_event else None

    def to_dict(self) -> dict:
        return {
            "stepId": self.step_id,
            "journeyId": self.journey_id,
            "phase": self.phase,
            "location": self.location,
            "status": self.status,
            "startEvent": _event_ref_to_dict(self.start_event),
            "endEvent": _event_ref_to_dict(self.end_event),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Step":
        return cls(
            step_id=raw["stepId"],
            journey_id=raw["journeyId"],
            phase=raw["phase"],
            location=raw["location"],
            status=raw["status"],
            start_event=raw.get("startEvent"),
            end_event=raw.get("endEvent"),
        )


@dataclass
class Journey:
    """A traced object (lot, pallet, shipment) and its lineage links."""

    journey_id: str
    parents: list[str] = field(default_factory=list)
    children: list[str] = field(default_factory=list)
    steps: list[str] = field(default_factory=list)
    product_type: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "journeyId": self.journey_id,
            "parents": list(self.parents),
            "children": list(self.children),
            "steps": list(self.steps),
            "productType": self.product_type,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Journey":
        return cls(
            journey_id=raw["journeyId"],
            parents=list(raw.get("parents", [])),
            children=list(raw.get("children", [])),
            steps=list(raw.get("steps", [])),
            product_type=raw.get("productType"),
        )


@dataclass
class PointRecord:
    """One committed sensor sample bound to a journey step."""

    journey_id: str
    step_id: str
    device_id: str
    timestamp: datetime
    kind: str
    value: tuple[float, ...]
    topic: str = ""

    def to_dict(self) -> dict:
        return {
            "journeyId": self.journey_id,
            "stepId": self.step_id,
            "deviceId": self.device_id,
            "timestamp": format_rfc3339(self.timestamp),
            "kind": self.kind,
            "value": list(self.value),
            "topic": self.topic,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PointRecord":
        return cls(
            journey_id=raw["journeyId"],
            step_id=raw["stepId"],
            device_id=raw["deviceId"],
            timestamp=parse_rfc3339(raw["timestamp"]),
            kind=raw["kind"],
            value=tuple(float(v) for v in raw["value"]),
            topic=raw.get("topic", ""),
        )


@dataclass
class ItemData:
    """Item attributes one stakeholder (topic) claims about a journey."""

    topic: str
    journey_id: str
    attributes: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "topic": self.topic,
            "journeyId": self.journey_id,
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ItemData":
        return cls(raw["topic"], raw["journeyId"], dict(raw.get("attributes", {})))


@dataclass
class RuleSpec:
    """One rule binding inside a policy."""

    rule_name: str
    params: dict[str, Any]
    severity: str

    def parsed_params(self) -> Any:
        return rules.RULE_PARAM_TYPES[self.rule_name].from_dict(self.params)

    def to_dict(self) -> dict:
        return {"ruleName": self.rule_name, "params": dict(self.params), "severity": self.severity}


@dataclass
class Policy:
    """Product-scoped verification policy: mode, phase filter and rule set."""

    policy_id: str
    product_type: str
    mode: str
    rules: list[RuleSpec]
    phases: list[str] = field(default_factory=list)
    preprocess: dict[str, Any] = field(default_factory=dict)

    def applies_to_phase(self, phase: Optional[str]) -> bool:
        return not self.phases or phase is None or phase in self.phases

    def rules_named(self, rule_name: str) -> list[RuleSpec]:
        return [spec for spec in self.rules if spec.rule_name == rule_name]

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "policyId": self.policy_id,
            "productType": self.product_type,
            "mode": self.mode,
            "phases": list(self.phases),
            "rules": [spec.to_dict() for spec in self.rules],
        }
        if self.preprocess:
            doc["preprocess"] = dict(self.preprocess)
        return doc

    @classmethod
    def from_dict(cls, raw: dict) -> "Policy":
        validate_policy_document(raw)
        return cls(
            policy_id=raw["policyId"],
            product_type=raw["productType"],
            mode=raw["mode"],
            phases=list(raw.get("phases", [])),
            rules=[
                RuleSpec(item["ruleName"], dict(item["params"]), item["severity"])
                for item in raw["rules"]
            ],
            preprocess=dict(raw.get("preprocess", {})),
        )


def _policy_schema() -> dict:
    text = resources.files("veritrail.schemas").joinpath("policy.schema.json").read_text("utf-8")
    return json.loads(text)


_SCHEMA_CACHE: Optional[dict] = None


def validate_policy_document(raw: dict) -> None:
    """Validate a policy JSON document, including per-rule parameter shapes."""
    global _SCHEMA_CACHE
    if _SCHEMA_CACHE is None:
        _SCHEMA_CACHE = _policy_schema()
    validator = jsonschema.Draft7Validator(_SCHEMA_CACHE)
    errors = sorted(validator.iter_errors(raw), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise SchemaViolation(first.json_path, first.message)
    for index, item in enumerate(raw["rules"]):
        try:
            rules.RULE_PARAM_TYPES[item["ruleName"]].from_dict(item["params"])
        except rules.InvalidRuleParams as exc:
            raise SchemaViolation(f"$.rules[{index}].params", str(exc)) from exc


@dataclass
class VerificationRecord:
    """Committed outcome of verifying one step or journey."""

    verification_id: str
    subject: str
    subject_type: str  # "step" | "journey"
    outcome: str
    rule_results: list[rules.RuleResult]
    discrepancies: list[dict] = field(default_factory=list)
    tx_ids: list[str] = field(default_factory=list)
    verified_at: Optional[datetime] = None
    trigger: str = "manual"
    requested_by: str = ""
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verificationId": self.verification_id,
            "subject": self.subject,
            "subjectType": self.subject_type,
            "outcome": self.outcome,
            "ruleResults": [result.to_dict() for result in self.rule_results],
            "discrepancies": [dict(d) for d in self.discrepancies],
            "txIds": list(self.tx_ids),
            "verifiedAt": format_rfc3339(self.verified_at) if self.verified_at else None,
            "trigger": self.trigger,
            "requestedBy": self.requested_by,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "VerificationRecord":
        return cls(
            verification_id=raw["verificationId"],
            subject=raw["subject"],
            subject_type=raw["subjectType"],
            outcome=raw["outcome"],
            rule_results=[rules.RuleResult.from_dict(r) for r in raw.get("ruleResults", [])],
            discrepancies=list(raw.get("discrepancies", [])),
            tx_ids=list(raw.get("txIds", [])),
            verified_at=parse_rfc3339(raw["verifiedAt"]) if raw.get("verifiedAt") else None,
            trigger=raw.get("trigger", "manual"),
            requested_by=raw.get("requestedBy", ""),
            notes=list(raw.get("notes", [])),
        )


@dataclass
class ApplyResult:
    """What applying one envelope changed."""

    skipped: bool = False
    tx_id: Optional[str] = None
    journeys: list[str] = field(default_factory=list)
    opened_steps: list[tuple[str, str]] = field(default_factory=list)
    closed_steps: list[tuple[str, str]] = field(default_factory=list)
    claims: list[tuple[str, str]] = field(default_factory=list)


def step_identity(journey_id: str, phase: str, biz_location: str, start_iso: str) -> str:
    """Deterministic step id so replayed event streams rebuild identical state."""
    body = "\x1f".join((journey_id, phase, biz_location, start_iso))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]


# -- state store -------------------------------------------------------------


class StateStore:
    """Key layout and read/write paths for all domain records."""

    def __init__(
        self,
        ledger: SimulatedLedger,
        auto_create: bool = True,
        closing_phases: frozenset[str] = DEFAULT_CLOSING_PHASES,
    ):
        self.ledger = ledger
        self.auto_create = auto_create
        self.closing_phases = closing_phases

    # key helpers

    @staticmethod
    def journey_key(journey_id: str) -> str:
        return encode_composite_key("Journey", [journey_id])

    @staticmethod
    def step_key(journey_id: str, step_id: str) -> str:
        return encode_composite_key("Step", [journey_id, step_id])

    @staticmethod
    def step_index_key(step_id: str) -> str:
        return encode_composite_key("StepIndex", [step_id])

    @staticmethod
    def point_key(journey_id: str, step_id: str, device_id: str, stamp: datetime) -> str:
        return encode_composite_key(
            "Point", [journey_id, step_id, device_id, format_rfc3339(stamp)]
        )

    @staticmethod
    def claim_key(journey_id: str, topic: str) -> str:
        return encode_composite_key("ItemData", [journey_id, topic])

    @staticmethod
    def policy_key(product_type: str, policy_id: str) -> str:
        return encode_composite_key("Policy", [product_type, policy_id])

    @staticmethod
    def verification_key(subject: str, seq: int) -> str:
        return encode_composite_key("Verification", [subject, f"{seq:08d}"])

    @staticmethod
    def reliability_key(device_id: str) -> str:
        return encode_composite_key("DeviceReliability", [device_id])

    @staticmethod
    def event_seen_key(fingerprint: str) -> str:
        return encode_composite_key("EventSeen", [fingerprint])

    # journeys and steps

    def get_journey(self, journey_id: str) -> Optional[Journey]:
        raw = self.ledger.try_get(self.journey_key(journey_id))
        return Journey.from_dict(json.loads(raw)) if raw else None

    def get_step(self, journey_id: str, step_id: str) -> Optional[Step]:
        raw = self.ledger.try_get(self.step_key(journey_id, step_id))
        return Step.from_dict(json.loads(raw)) if raw else None

    def find_step(self, step_id: str) -> Optional[Step]:
        raw = self.ledger.try_get(self.step_index_key(step_id))
        if raw is None:
            return None
        journey_id = json.loads(raw)["journeyId"]
        return self.get_step(journey_id, step_id)

    def steps_of(self, journey: Journey) -> list[Step]:
        steps = []
        for step_id in journey.steps:
            step = self.get_step(journey.journey_id, step_id)
            if step is not None:
                steps.append(step)
        return steps

    # event application

    def apply_event(self, envelope: IngestEnvelope) -> ApplyResult:
        """Apply one envelope in a single transaction; replays are no-ops."""
        fingerprint = envelope.fingerprint()
        seen_key = self.event_seen_key(fingerprint)
        if self.ledger.try_get(seen_key) is not None:
            return ApplyResult(skipped=True, tx_id=self.ledger.last_writer(seen_key))

        staged: dict[str, dict] = {}
        result = ApplyResult()
        event = envelope.event

        if event.event_type == OBJECT_EVENT:
            for epc in event.epc_list:
                self._apply_to_journey(epc, envelope, staged, result)
        elif event.event_type == AGGREGATION_EVENT:
            self._apply_aggregation(envelope, staged, result)
        else:
            self._apply_transformation(envelope, staged, result)

        staged[seen_key] = {"appliedAt": format_rfc3339(event.event_time)}
        tx = self.ledger.begin()
        for key, value in staged.items():
            tx.put_json(key, value)
        for journey_id, step_id in result.closed_steps:
            step = staged.get(self.step_key(journey_id, step_id))
            tx.emit(
                "step.closed",
                {
                    "journeyId": journey_id,
                    "stepId": step_id,
                    "phase": step["phase"] if step else "",
                    "closedBy": event.biz_step,
                },
            )
        record = self.ledger.commit(tx)
        result.tx_id = record.tx_id
        return result

    def _read_journey(self, journey_id: str, staged: dict) -> Optional[Journey]:
        key = self.journey_key(journey_id)
        if key in staged:
            return Journey.from_dict(staged[key])
        return self.get_journey(journey_id)

    def _read_step(self, journey_id: str, step_id: str, staged: dict) -> Optional[Step]:
        key = self.step_key(journey_id, step_id)
        if key in staged:
            return Step.from_dict(staged[key])
        return self.get_step(journey_id, step_id)

    def _ensure_journey(self, journey_id: str, staged: dict, result: ApplyResult) -> Journey:
        journey = self._read_journey(journey_id, staged)
        if journey is None:
            if not self.auto_create:
                raise UnknownJourneyReference(journey_id)
            journey = Journey(journey_id=journey_id)
            result.journeys.append(journey_id)
        elif journey_id not in result.journeys:
            result.journeys.append(journey_id)
        return journey

    def _stage_journey(self, journey: Journey, staged: dict) -> None:
        staged[self.journey_key(journey.journey_id)] = journey.to_dict()

    def _stage_step(self, step: Step, staged: dict) -> None:
        staged[self.step_key(step.journey_id, step.step_id)] = step.to_dict()
        staged[self.step_index_key(step.step_id)] = {"journeyId": step.journey_id}

    def _merge_claims(
        self, journey_id: str, envelope: IngestEnvelope, staged: dict, result: ApplyResult
    ) -> None:
        attrs = envelope.event.item_attributes
        if not attrs:
            return
        key = self.claim_key(journey_id, envelope.topic)
        if key in staged:
            existing = ItemData.from_dict(staged[key])
        else:
            raw = self.ledger.try_get(key)
            existing = (
                ItemData.from_dict(json.loads(raw))
                if raw
                else ItemData(envelope.topic, journey_id)
            )
        existing.attributes.update(attrs)
        staged[key] = existing.to_dict()
        result.claims.append((journey_id, envelope.topic))

    def _set_product_type(
        self, journey: Journey, envelope: IngestEnvelope, staged: dict
    ) -> None:
        claimed = envelope.event.item_attributes.get("productType")
        if journey.product_type is None and isinstance(claimed, str) and claimed:
            journey.product_type = claimed
            self._stage_journey(journey, staged)

    def _apply_to_journey(
        self, journey_id: str, envelope: IngestEnvelope, staged: dict, result: ApplyResult
    ) -> None:
        event = envelope.event
        journey = self._ensure_journey(journey_id, staged, result)
        open_steps = [
            step
            for step_id in journey.steps
            if (step := self._read_step(journey_id, step_id, staged)) is not None
            and step.status == STEP_OPEN
        ]
        event_ref = {
            "time": format_rfc3339(event.event_time),
            "bizLocation": event.biz_location,
            "eventId": envelope.fingerprint()[:16],
        }
        same_phase = [step for step in open_steps if step.phase == event.biz_step]
        if same_phase and event.action == "OBSERVE":
            # The matching observation at the far end closes the step.
            step = same_phase[-1]
            step.status = STEP_CLOSED
            step.end_event = event_ref
            self._stage_step(step, staged)
            result.closed_steps.append((journey_id, step.step_id))
        elif event.biz_step in self.closing_phases and open_steps:
            # Arrival-style phases close whatever transport step is running.
            step = open_steps[-1]
            step.status = STEP_CLOSED
            step.end_event = event_ref
            self._stage_step(step, staged)
            result.closed_steps.append((journey_id, step.step_id))
        elif event.biz_step:
            step_id = step_identity(
                journey_id, event.biz_step, event.biz_location, event_ref["time"]
            )
            step = Step(
                step_id=step_id,
                journey_id=journey_id,
                phase=event.biz_step,
                location=event.biz_location,
                start_event=event_ref,
            )
            if step_id not in journey.steps:
                journey.steps.append(step_id)
            self._stage_step(step, staged)
            result.opened_steps.append((journey_id, step_id))

        self._stage_journey(journey, staged)
        self._set_product_type(journey, envelope, staged)
        self._merge_claims(journey_id, envelope, staged, result)

    def _descendants(self, journey_id: str, staged: dict) -> set[str]:
        seen: set[str] = set()
        frontier = [journey_id]
        while frontier:
            current = frontier.pop()
            journey = self._read_journey(current, staged)
            if journey is None:
                continue
            for child in journey.children:
                if child not in seen:
                    seen.add(child)
                    frontier.append(child)
        return seen

    def _link(self, parent_id: str, child_id: str, staged: dict, result: ApplyResult) -> None:
        if parent_id == child_id:
            raise CycleDetected(f"{parent_id} cannot contain itself")
        if parent_id in self._descendants(child_id, staged):
            raise CycleDetected(f"linking {parent_id} -> {child_id} closes a cycle")
        parent = self._ensure_journey(parent_id, staged, result)
        child = self._ensure_journey(child_id, staged, result)
        if child_id not in parent.children:
            parent.children.append(child_id)
        if parent_id not in child.parents:
            child.parents.append(parent_id)
        self._stage_journey(parent, staged)
        self._stage_journey(child, staged)

    def _unlink(self, parent_id: str, child_id: str, staged: dict, result: ApplyResult) -> None:
        parent = self._ensure_journey(parent_id, staged, result)
        child = self._ensure_journey(child_id, staged, result)
        if child_id in parent.children:
            parent.children.remove(child_id)
        if parent_id in child.parents:
            child.parents.remove(parent_id)
        self._stage_journey(parent, staged)
        self._stage_journey(child, staged)

    def _apply_aggregation(
        self, envelope: IngestEnvelope, staged: dict, result: ApplyResult
    ) -> None:
        event = envelope.event
        parent_id = event.parent_id or ""
        parent = self._ensure_journey(parent_id, staged, result)
        self._stage_journey(parent, staged)
        for child_id in event.child_epcs:
            if event.action == "ADD":
                self._link(parent_id, child_id, staged, result)
            elif event.action == "DELETE":
                self._unlink(parent_id, child_id, staged, result)
            else:
                self._ensure_journey(child_id, staged, result)
        parent = self._read_journey(parent_id, staged) or parent
        self._set_product_type(parent, envelope, staged)
        self._merge_claims(parent_id, envelope, staged, result)

    def _apply_transformation(
        self, envelope: IngestEnvelope, staged: dict, result: ApplyResult
    ) -> None:
        event = envelope.event
        for input_id in event.input_epcs:
            self._ensure_journey(input_id, staged, result)
        for output_id in event.output_epcs:
            self._ensure_journey(output_id, staged, result)
        for input_id in event.input_epcs:
            for output_id in event.output_epcs:
                self._link(input_id, output_id, staged, result)
        for output_id in event.output_epcs:
            journey = self._read_journey(output_id, staged)
            if journey is not None:
                self._set_product_type(journey, envelope, staged)
            self._merge_claims(output_id, envelope, staged, result)

    # lineage

    def lineage(self, journey_id: str, direction: str = "up") -> dict:
        """Walk parent (up) or child (down) links from a journey.

        Returns the reachable subgraph; a cycle in the stored links raises
        CycleDetected instead of looping forever.
        """
        if direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")
        if self.get_journey(journey_id) is None:
            raise UnknownJourneyReference(journey_id)
        nodes: dict[str, dict] = {}
        edges: list[list[str]] = []
        safe: set[str] = set()

        def visit(current: str, path: tuple[str, ...]) -> None:
            if current in path:
                raise CycleDetected(" -> ".join(path + (current,)))
            journey = self.get_journey(current)
            if journey is None:
                nodes.setdefault(current, {"productType": None, "known": False})
                return
            nodes.setdefault(
                current, {"productType": journey.product_type, "known": True}
            )
            if current in safe:
                return
            linked = journey.parents if direction == "up" else journey.children
            for other in linked:
                edges.append([current, other])
                visit(other, path + (current,))
            safe.add(current)

        visit(journey_id, ())
        # A diamond reaches the same edge once per path; dedupe preserving order.
        unique_edges: list[list[str]] = []
        for edge in edges:
            if edge not in unique_edges:
                unique_edges.append(edge)
        return {"root": journey_id, "direction": direction, "nodes": nodes, "edges": unique_edges}

    # points

    def append_point(
        self,
        journey_id: str,
        step_id: str,
        reading: RawReading,
        topic: str = "",
    ) -> tuple[PointRecord, TransactionRecord]:
        """Commit one sensor point; the key embeds device and timestamp."""
        step = self.get_step(journey_id, step_id)
        if step is None:
            raise UnknownStep(f"{journey_id}/{step_id}")
        point = PointRecord(
            journey_id=journey_id,
            step_id=step_id,
            device_id=reading.device_id,
            timestamp=reading.timestamp,
            kind=reading.kind,
            value=reading.value,
            topic=topic,
        )
        key = self.point_key(journey_id, step_id, reading.device_id, reading.timestamp)
        tx = self.ledger.begin()
        if self.ledger.try_get(key) is not None:
            raise DuplicatePoint(key)
        tx.put_json(key, point.to_dict())
        record = self.ledger.commit(tx)
        return point, record

    def append_points(
        self,
        journey_id: str,
        rows: Iterable[tuple[str, RawReading, str]],
    ) -> tuple[list[PointRecord], list[tuple[RawReading, str]], Optional[TransactionRecord]]:
        """Commit a batch of (step_id, reading, topic) rows in one transaction.

        Duplicates (already committed or repeated within the batch) are
        returned as rejects rather than failing the batch.
        """
        tx = self.ledger.begin()
        accepted: list[PointRecord] = []
        rejected: list[tuple[RawReading, str]] = []
        staged_keys: set[str] = set()
        for step_id, reading, topic in rows:
            step = self.get_step(journey_id, step_id)
            if step is None:
                rejected.append((reading, f"unknown step {step_id}"))
                continue
            key = self.point_key(journey_id, step_id, reading.device_id, reading.timestamp)
            if key in staged_keys or self.ledger.try_get(key) is not None:
                rejected.append((reading, "duplicate point"))
                continue
            point = PointRecord(
                journey_id=journey_id,
                step_id=step_id,
                device_id=reading.device_id,
                timestamp=reading.timestamp,
                kind=reading.kind,
                value=reading.value,
                topic=topic,
            )
            tx.put_json(key, point.to_dict())
            staged_keys.add(key)
            accepted.append(point)
        record = self.ledger.commit(tx) if accepted else None
        return accepted, rejected, record

    def points_for_step(self, journey_id: str, step_id: str) -> list[PointRecord]:
        rows = self.ledger.get_range(prefix_of("Point", [journey_id, step_id]))
        points = [PointRecord.from_dict(json.loads(value)) for _, value in rows]
        points.sort(key=lambda p: (p.timestamp, p.device_id))
        return points

    def resolve_step_for(self, journey_id: str, stamp: datetime) -> Optional[Step]:
        """Step whose [start, end] span covers the timestamp; latest start wins."""
        journey = self.get_journey(journey_id)
        if journey is None:
            raise UnknownJourneyReference(journey_id)
        best: Optional[Step] = None
        for step in self.steps_of(journey):
            start, end = step.start_time, step.end_time
            if start is None or start > stamp:
                continue
            if end is not None and stamp > end:
                continue
            if best is None or (best.start_time or start) <= start:
                best = step
        return best

    # claims

    def claims_for_journey(self, journey_id: str) -> list[ItemData]:
        rows = self.ledger.get_range(prefix_of("ItemData", [journey_id]))
        return [ItemData.from_dict(json.loads(value)) for _, value in rows]

    # policies

    def load_policy(self, document: str | dict) -> tuple[Policy, TransactionRecord]:
        """Validate and commit a policy document."""
        raw = json.loads(document) if isinstance(document, str) else document
        policy = Policy.from_dict(raw)
        key = self.policy_key(policy.product_type, policy.policy_id)
        record = self.ledger.submit({key: canonical_bytes(policy.to_dict())})
        return policy, record

    def policies_for(self, product_type: Optional[str], phase: Optional[str] = None) -> list[Policy]:
        """Policies matching a product type (exact match first, then wildcard)."""
        found: list[Policy] = []
        prefixes = []
        if product_type and product_type != WILDCARD_PRODUCT:
            prefixes.append(prefix_of("Policy", [product_type]))
        prefixes.append(prefix_of("Policy", [WILDCARD_PRODUCT]))
        for prefix in prefixes:
            for _, value in self.ledger.get_range(prefix):
                policy = Policy.from_dict(json.loads(value))
                if policy.applies_to_phase(phase):
                    found.append(policy)
        return found

    def policy_for(self, product_type: Optional[str], phase: Optional[str] = None) -> Optional[Policy]:
        policies = self.policies_for(product_type, phase)
        return policies[0] if policies else None

    # verification records

    def verifications_for(self, subject: str) -> list[VerificationRecord]:
        rows = self.ledger.get_range(prefix_of("Verification", [subject]))
        return [VerificationRecord.from_dict(json.loads(value)) for _, value in rows]

    def latest_verification(self, subject: str) -> Optional[VerificationRecord]:
        records = self.verifications_for(subject)
        return records[-1] if records else None

    def next_verification_seq(self, subject: str) -> int:
        return len(self.ledger.get_range(prefix_of("Verification", [subject])))

    def commit_verification(
        self,
        record: VerificationRecord,
        reliability: Optional[dict[str, float]] = None,
        events: Iterable[tuple[str, dict]] = (),
    ) -> TransactionRecord:
        """Commit a verification record, reliability updates and its events atomically."""
        seq = self.next_verification_seq(record.subject)
        tx = self.ledger.begin()
        tx.put_json(self.verification_key(record.subject, seq), record.to_dict())
        for device_id, score in (reliability or {}).items():
            tx.put_json(self.reliability_key(device_id), {"deviceId": device_id, "score": score})
        for name, payload in events:
            tx.emit(name, payload)
        return self.ledger.commit(tx)

    # device reliability

    def reliability_of(self, device_id: str, default: float = 1.0) -> float:
        raw = self.ledger.try_get(self.reliability_key(device_id))
        return float(json.loads(raw)["score"]) if raw else default

    def reliability_scores(self, device_ids: Iterable[str], default: float = 1.0) -> dict[str, float]:
        return {device_id: self.reliability_of(device_id, default) for device_id in device_ids}
