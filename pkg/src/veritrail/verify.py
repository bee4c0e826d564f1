"""Verification orchestration: preprocess a subject's sensor data, run the
policy's rules, compare cross-stakeholder claims and commit the outcome.

Source modes decide how multiple devices combine.  SSoD expects a single
source: one device runs the cleaning chain, several get a naive equal-weight
merge.  MSoD fuses devices with Mahalanobis weighting.  DSoD partitions
devices by stakeholder topic, runs a pipeline per topic and surfaces verdict
conflicts side by side; journey-level DSoD additionally compares item-data
claims attribute by attribute.

Every verification commits a VerificationRecord plus a
``verification.completed`` event, and a ``verification.flagged`` event when
the outcome is not okay.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional, Sequence

from . import preprocess, rules
from .ingest import KIND_GPS
from .model import (
    ItemData,
    Policy,
    RuleSpec,
    StateStore,
    Step,
    VerificationRecord,
)

NUMERIC_EPSILON = 1e-12

STEP_SUBJECT = "step"
JOURNEY_SUBJECT = "journey"

SINGLE = "single"
PER_TOPIC_NOTE = "topic"

JOURNEY_SCOPE_RULES = {"handoverTime", "attributeConsistency"}
STEP_SCOPE_RULES = {"threshold", "geofence", "backtrack", "shipmentTimeout"}


class UnknownSubject(Exception):
    """Verification requested for a subject the ledger does not know."""


@dataclass
class VerificationRequest:
    subject: str
    subject_type: str = STEP_SUBJECT
    trigger: str = "manual"  # "manual" | "auto"
    requested_by: str = ""


@dataclass
class VerifyConfig:
    """Knobs that are not policy content: triggers and reliability handling."""

    reset_reliability: bool = False
    default_numeric_tolerance: float = 0.0


@dataclass
class DiscrepancyReport:
    """Cross-source comparison outcome for one attribute (or verdict)."""

    journey_id: str
    attribute: str
    per_topic: dict[str, Any]
    status: str  # "consistent" | "discrepant"
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "journeyId": self.journey_id,
            "attribute": self.attribute,
            "perTopic": dict(self.per_topic),
            "status": self.status,
            "note": self.note,
        }


@dataclass
class KindPipeline:
    """Preprocessing output for one reading kind (and one topic under DSoD)."""

    kind: str
    topic: str
    devices: list[str]
    raw: dict[str, list[preprocess.Sample]]
    filtered: dict[str, list[preprocess.Sample]]
    removed: dict[str, list[tuple[preprocess.Sample, str]]]
    fused: list[preprocess.Sample]
    frames: Optional[list[preprocess.FusionFrame]]
    mode: str


@dataclass
class StepPipeline:
    """Everything preprocessing produced for a step, ready for the rules."""

    step: Step
    pipelines: list[KindPipeline] = field(default_factory=list)
    reliability: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    read_keys: list[str] = field(default_factory=list)

    def for_kind(self, kind: str) -> list[KindPipeline]:
        return [p for p in self.pipelines if p.kind == kind]


def scalar_series(samples: Sequence[preprocess.Sample]) -> list[tuple[datetime, float]]:
    return [(stamp, value[0]) for stamp, value in samples]


def gps_track(samples: Sequence[preprocess.Sample]) -> list[tuple[datetime, tuple[float, float]]]:
    return [(stamp, (value[0], value[1])) for stamp, value in samples]


def compare_claims(
    claims: Sequence[ItemData],
    params: Optional[rules.ConsistencyParams] = None,
) -> list[DiscrepancyReport]:
    """Compare item-data claims attribute by attribute across topics.

    Numeric values are discrepant when their relative spread
    (max - min) / max(|max|, eps) exceeds the tolerance; strings must match
    exactly.  Attributes missing from some topics stay consistent with a
    partial-coverage note, since absence is not a contradiction.
    """
    params = params or rules.ConsistencyParams()
    reports: list[DiscrepancyReport] = []
    if not claims:
        return reports
    journey_id = claims[0].journey_id
    topics = sorted({claim.topic for claim in claims})
    by_topic = {claim.topic: claim.attributes for claim in claims}
    attributes = sorted({attr for claim in claims for attr in claim.attributes})
    for attribute in attributes:
        present = {
            topic: by_topic[topic][attribute]
            for topic in topics
            if attribute in by_topic[topic]
        }
        note = ""
        if len(present) < len(topics):
            note = f"partial coverage ({len(present)} of {len(topics)} topics)"
        if len(present) <= 1:
            if len(topics) < 2:
                note = "insufficient sources"
            reports.append(
                DiscrepancyReport(journey_id, attribute, dict(present), "consistent", note)
            )
            continue
        values = list(present.values())
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            highest, lowest = max(values), min(values)
            spread = (highest - lowest) / max(abs(highest), NUMERIC_EPSILON)
            tolerance = params.attribute_tolerances.get(attribute, params.numeric_tolerance)
            status = "discrepant" if spread > tolerance else "consistent"
            if note:
                note += "; "
            note += f"relative spread {spread:.6g} vs tolerance {tolerance:g}"
        else:
            rendered = {str(v) for v in values}
            status = "discrepant" if len(rendered) > 1 else "consistent"
        reports.append(DiscrepancyReport(journey_id, attribute, dict(present), status, note))
    return reports


def aggregate_outcomes(verdicts: Sequence[str]) -> str:
    """Journey/step outcome is the worst verdict observed; empty means okay."""
    return rules.max_verdict(verdicts)


class VerificationManager:
    """Runs verifications against a StateStore and commits their records."""

    def __init__(self, store: StateStore, config: Optional[VerifyConfig] = None):
        self.store = store
        self.config = config or VerifyConfig()

    # -- preprocessing -------------------------------------------------

    def preprocess_step(self, step: Step, policy: Optional[Policy]) -> StepPipeline:
        """Group a step's points by kind (and topic under DSoD), clean and fuse."""
        mode = policy.mode if policy else "SSoD"
        config = preprocess.PreprocessConfig.from_dict(policy.preprocess if policy else None)
        points = self.store.points_for_step(step.journey_id, step.step_id)
        pipeline = StepPipeline(step=step)
        pipeline.read_keys.append(self.store.step_key(step.journey_id, step.step_id))
        for point in points:
            pipeline.read_keys.append(
                self.store.point_key(point.journey_id, point.step_id, point.device_id, point.timestamp)
            )

        grouped: dict[tuple[str, str], dict[str, list[preprocess.Sample]]] = {}
        for point in points:
            topic = point.topic if mode == "DSoD" else ""
            grouped.setdefault((point.kind, topic), {}).setdefault(point.device_id, []).append(
                (point.timestamp, point.value)
            )

        devices_seen = sorted({point.device_id for point in points})
        if self.config.reset_reliability:
            scores = {device: config.initial_reliability for device in devices_seen}
        else:
            scores = self.store.reliability_scores(
                devices_seen, default=config.initial_reliability
            )
            pipeline.read_keys.extend(self.store.reliability_key(d) for d in devices_seen)

        for (kind, topic), by_device in sorted(grouped.items()):
            pipeline.pipelines.append(
                self._run_kind(kind, topic, by_device, mode, config, scores, pipeline.notes)
            )
        pipeline.reliability = scores
        return pipeline

    def _run_kind(
        self,
        kind: str,
        topic: str,
        by_device: dict[str, list[preprocess.Sample]],
        mode: str,
        config: preprocess.PreprocessConfig,
        scores: dict[str, float],
        notes: list[str],
    ) -> KindPipeline:
        raw: dict[str, list[preprocess.Sample]] = {}
        removed: dict[str, list[tuple[preprocess.Sample, str]]] = {}
        for device, samples in sorted(by_device.items()):
            ordered, dropped = preprocess.normalize_series(samples)
            raw[device] = ordered
            removed[device] = list(dropped)
        devices = sorted(raw)
        label = f"{kind}/{topic}" if topic else kind

        if len(devices) == 1:
            device = devices[0]
            filtered, fused = self._single_device_chain(kind, raw[device], config, removed, device)
            chain_mode = SINGLE
            frames = None
        else:
            # Several devices fuse frame by frame inside the filter; the
            # weighting depends on the declared source mode.
            weighting = preprocess.EQUAL if mode == "SSoD" else preprocess.MAHALANOBIS
            if mode == "SSoD":
                notes.append(
                    f"{label}: {len(devices)} devices under a single-source policy, "
                    "merged with equal weights"
                )
            frames = preprocess.group_frames(raw, config.frame_window_sec)
            result = preprocess.fuse_frames(
                frames,
                preprocess.make_filter(kind, config),
                kind,
                config,
                reliability={d: scores.get(d, config.initial_reliability) for d in devices},
                weighting=weighting,
            )
            scores.update(result.reliability)
            filtered = dict(raw)
            fused = result.samples
            chain_mode = weighting
        for device in devices:
            if removed[device]:
                notes.append(f"{label}: device {device} lost {len(removed[device])} samples in cleaning")
        return KindPipeline(
            kind=kind,
            topic=topic,
            devices=devices,
            raw=raw,
            filtered=filtered,
            removed=removed,
            fused=fused,
            frames=frames,
            mode=chain_mode,
        )

    def _single_device_chain(
        self,
        kind: str,
        samples: list[preprocess.Sample],
        config: preprocess.PreprocessConfig,
        removed: dict[str, list[tuple[preprocess.Sample, str]]],
        device: str,
    ) -> tuple[dict[str, list[preprocess.Sample]], list[preprocess.Sample]]:
        if kind == KIND_GPS:
            track = gps_track(samples)
            kept, dropped = preprocess.speed_filter(track, config.v_max_mps)
            removed[device].extend(((t, p), reason) for (t, p), reason in dropped)
            cleaned: list[preprocess.Sample] = [(t, (p[0], p[1])) for t, p in kept]
        else:
            series = scalar_series(samples)
            kept_scalar, dropped_scalar = preprocess.iqr_filter(series, config.iqr_k)
            removed[device].extend(((t, (v,)), reason) for (t, v), reason in dropped_scalar)
            cleaned = [(t, (v,)) for t, v in kept_scalar]
        smoothed = preprocess.kalman_smooth(cleaned, preprocess.make_filter(kind, config))
        return {device: cleaned}, smoothed

    # -- rule dispatch ---------------------------------------------------

    def _run_step_rules(
        self,
        policy: Policy,
        step: Step,
        pipeline: StepPipeline,
    ) -> tuple[list[rules.RuleResult], list[DiscrepancyReport], list[str]]:
        results: list[rules.RuleResult] = []
        discrepancies: list[DiscrepancyReport] = []
        notes: list[str] = []
        for spec in policy.rules:
            if spec.rule_name in JOURNEY_SCOPE_RULES:
                notes.append(f"{spec.rule_name} is evaluated at journey scope, skipped here")
                continue
            per_topic = self._evaluate_step_rule(spec, step, pipeline)
            if len(per_topic) > 1:
                verdicts = {topic: result.verdict for topic, result in per_topic}
                if len(set(verdicts.values())) > 1:
                    discrepancies.append(
                        DiscrepancyReport(
                            journey_id=step.journey_id,
                            attribute=f"verdict:{spec.rule_name}",
                            per_topic=verdicts,
                            status="discrepant",
                            note="independent sources disagree on this rule",
                        )
                    )
            for topic, result in per_topic:
                if topic:
                    result.notes.append(f"{PER_TOPIC_NOTE}={topic}")
                results.append(result)
        return results, discrepancies, notes

    def _evaluate_step_rule(
        self, spec: RuleSpec, step: Step, pipeline: StepPipeline
    ) -> list[tuple[str, rules.RuleResult]]:
        params = spec.parsed_params()
        if spec.rule_name == "shipmentTimeout":
            result = rules.rule_shipment_timeout(
                step.start_time, step.end_time, params, spec.severity, ref=step.step_id
            )
            return [("", result)]
        if spec.rule_name == "threshold":
            kind_pipelines = pipeline.for_kind(params.kind)
            if not kind_pipelines:
                return [("", rules.rule_threshold([], params, spec.severity))]
            return [
                (p.topic, rules.rule_threshold(scalar_series(p.fused), params, spec.severity))
                for p in kind_pipelines
            ]
        if spec.rule_name in ("geofence", "backtrack"):
            kind_pipelines = pipeline.for_kind(KIND_GPS)
            evaluate = rules.rule_geofence if spec.rule_name == "geofence" else rules.rule_backtrack
            if not kind_pipelines:
                return [("", evaluate([], params, spec.severity))]
            return [
                (p.topic, evaluate(gps_track(p.fused), params, spec.severity))
                for p in kind_pipelines
            ]
        raise ValueError(f"unhandled rule {spec.rule_name!r}")

    # -- record plumbing -------------------------------------------------

    def _record_id(self, subject: str, seq: int) -> str:
        digest = hashlib.sha256(f"{subject}|{seq}".encode("utf-8")).hexdigest()[:16]
        return f"vrf-{digest}"

    def _collect_tx_ids(self, keys: Sequence[str]) -> list[str]:
        tx_ids: list[str] = []
        for key in keys:
            tx_id = self.store.ledger.last_writer(key)
            if tx_id and tx_id not in tx_ids:
                tx_ids.append(tx_id)
        return tx_ids

    def _commit(
        self,
        record: VerificationRecord,
        reliability: Optional[dict[str, float]] = None,
    ) -> VerificationRecord:
        events: list[tuple[str, dict]] = [
            (
                "verification.completed",
                {
                    "verificationId": record.verification_id,
                    "subject": record.subject,
                    "subjectType": record.subject_type,
                    "outcome": record.outcome,
                },
            )
        ]
        if record.outcome != rules.OKAY:
            flagged_rules = [
                {
                    "ruleName": result.rule_name,
                    "detail": result.violations[0].detail if result.violations else "; ".join(result.notes),
                }
                for result in record.rule_results
                if result.verdict != rules.OKAY
            ]
            events.append(
                (
                    "verification.flagged",
                    {
                        "severity": record.outcome,
                        "subject": record.subject,
                        "subjectType": record.subject_type,
                        "verificationId": record.verification_id,
                        "rules": flagged_rules,
                    },
                )
            )
        self.store.commit_verification(record, reliability=reliability, events=events)
        return record

    def _unverifiable(self, request: VerificationRequest, reason: str) -> VerificationRecord:
        seq = self.store.next_verification_seq(request.subject)
        result = rules.RuleResult(
            rule_name="policy",
            verdict=rules.WARNING,
            violations=[rules.Violation(ref=request.subject, detail=reason, magnitude=0.0)],
            notes=["unverifiable"],
        )
        record = VerificationRecord(
            verification_id=self._record_id(request.subject, seq),
            subject=request.subject,
            subject_type=request.subject_type,
            outcome=rules.WARNING,
            rule_results=[result],
            verified_at=datetime.now(timezone.utc),
            trigger=request.trigger,
            requested_by=request.requested_by,
            notes=["unverifiable: " + reason],
        )
        return self._commit(record)

    # -- public entry points ----------------------------------------------

    def verify_step(self, request: VerificationRequest) -> VerificationRecord:
        step = self.store.find_step(request.subject)
        if step is None:
            raise UnknownSubject(request.subject)
        request.subject_type = STEP_SUBJECT
        journey = self.store.get_journey(step.journey_id)
        policy = self.store.policy_for(
            journey.product_type if journey else None, step.phase
        )
        if policy is None:
            product = journey.product_type if journey else None
            return self._unverifiable(
                request,
                f"no applicable policy for productType={product!r}, phase={step.phase!r}",
            )

        pipeline = self.preprocess_step(step, policy)
        results, discrepancies, notes = self._run_step_rules(policy, step, pipeline)
        outcome = aggregate_outcomes([result.verdict for result in results])
        if not results:
            notes.append("no rules applied")

        read_keys = [
            self.store.journey_key(step.journey_id),
            self.store.policy_key(policy.product_type, policy.policy_id),
            *pipeline.read_keys,
        ]
        seq = self.store.next_verification_seq(request.subject)
        record = VerificationRecord(
            verification_id=self._record_id(request.subject, seq),
            subject=request.subject,
            subject_type=STEP_SUBJECT,
            outcome=outcome,
            rule_results=results,
            discrepancies=[d.to_dict() for d in discrepancies],
            tx_ids=self._collect_tx_ids(read_keys),
            verified_at=datetime.now(timezone.utc),
            trigger=request.trigger,
            requested_by=request.requested_by,
            notes=pipeline.notes + notes,
        )
        return self._commit(record, reliability=pipeline.reliability)

    def verify_journey(self, request: VerificationRequest) -> VerificationRecord:
        journey = self.store.get_journey(request.subject)
        if journey is None:
            raise UnknownSubject(request.subject)
        request.subject_type = JOURNEY_SUBJECT
        policy = self.store.policy_for(journey.product_type)
        if policy is None:
            return self._unverifiable(
                request,
                f"no applicable policy for productType={journey.product_type!r}",
            )

        steps = sorted(
            self.store.steps_of(journey),
            key=lambda s: (s.start_time or datetime.min.replace(tzinfo=timezone.utc)),
        )
        results: list[rules.RuleResult] = []
        discrepancies: list[DiscrepancyReport] = []
        notes: list[str] = []
        read_keys: list[str] = [
            self.store.journey_key(journey.journey_id),
            self.store.policy_key(policy.product_type, policy.policy_id),
        ]

        # Constituent step verdicts roll up into one synthetic result so the
        # outcome stays the max over rule_results.
        step_notes: list[str] = []
        step_verdicts: list[str] = []
        for step in steps:
            latest = self.store.latest_verification(step.step_id)
            if latest is None:
                latest = self.verify_step(
                    VerificationRequest(
                        subject=step.step_id,
                        trigger=request.trigger,
                        requested_by=request.requested_by,
                    )
                )
            step_verdicts.append(latest.outcome)
            step_notes.append(f"{step.phase} {step.step_id}: {latest.outcome}")
            read_keys.append(self.store.step_key(journey.journey_id, step.step_id))
        if steps:
            results.append(
                rules.RuleResult(
                    rule_name="stepRollup",
                    verdict=aggregate_outcomes(step_verdicts),
                    violations=[],
                    metrics={"stepCount": float(len(steps))},
                    notes=step_notes,
                )
            )
        else:
            notes.append("journey has no steps")

        for spec in policy.rules:
            if spec.rule_name == "handoverTime":
                results.append(self._journey_handover(spec, steps))
            elif spec.rule_name == "attributeConsistency":
                result, reports = self._journey_consistency(spec, journey.journey_id, read_keys)
                results.append(result)
                discrepancies.extend(reports)
            elif spec.rule_name in STEP_SCOPE_RULES:
                notes.append(f"{spec.rule_name} is evaluated per step, covered by the rollup")

        if policy.mode == "DSoD" and not policy.rules_named("attributeConsistency"):
            notes.append("DSoD policy without attributeConsistency rule; claims not compared")

        outcome = aggregate_outcomes([result.verdict for result in results])
        if not results:
            notes.append("no rules applied")
        seq = self.store.next_verification_seq(request.subject)
        record = VerificationRecord(
            verification_id=self._record_id(request.subject, seq),
            subject=request.subject,
            subject_type=JOURNEY_SUBJECT,
            outcome=outcome,
            rule_results=results,
            discrepancies=[d.to_dict() for d in discrepancies],
            tx_ids=self._collect_tx_ids(read_keys),
            verified_at=datetime.now(timezone.utc),
            trigger=request.trigger,
            requested_by=request.requested_by,
            notes=notes,
        )
        return self._commit(record)

    def _journey_handover(self, spec: RuleSpec, steps: list[Step]) -> rules.RuleResult:
        params = spec.parsed_params()
        if len(steps) < 2:
            return rules.RuleResult(
                "handoverTime", rules.OKAY, notes=["fewer than two steps, no handovers"]
            )
        merged = rules.RuleResult("handoverTime", rules.OKAY, metrics={"pairCount": float(len(steps) - 1)})
        verdicts: list[str] = []
        for previous, current in zip(steps, steps[1:]):
            ref = f"{previous.phase}->{current.phase}"
            partial = rules.rule_handover(
                previous.end_time, current.start_time, params, spec.severity, ref=ref
            )
            verdicts.append(partial.verdict)
            merged.violations.extend(partial.violations)
            merged.notes.extend(partial.notes)
            if "gapMin" in partial.metrics:
                merged.metrics[f"gapMin:{ref}"] = partial.metrics["gapMin"]
        merged.verdict = aggregate_outcomes(verdicts)
        return merged

    def _journey_consistency(
        self, spec: RuleSpec, journey_id: str, read_keys: list[str]
    ) -> tuple[rules.RuleResult, list[DiscrepancyReport]]:
        params = spec.parsed_params()
        claims = self.store.claims_for_journey(journey_id)
        read_keys.extend(self.store.claim_key(journey_id, claim.topic) for claim in claims)
        reports = compare_claims(claims, params)
        violations = [
            rules.Violation(
                ref=report.attribute,
                detail="topics disagree: "
                + ", ".join(f"{topic}={value!r}" for topic, value in sorted(report.per_topic.items())),
                magnitude=0.0,
            )
            for report in reports
            if report.status == "discrepant"
        ]
        notes = []
        if len({claim.topic for claim in claims}) < 2:
            notes.append("fewer than two claim sources, comparison is degenerate")
        result = rules.RuleResult(
            rule_name="attributeConsistency",
            verdict=spec.severity if violations else rules.OKAY,
            violations=violations,
            metrics={
                "attributeCount": float(len(reports)),
                "discrepantCount": float(len(violations)),
            },
            notes=notes,
        )
        return result, reports

    def reverify(self, subject: str, requested_by: str = "") -> VerificationRecord:
        """Run a fresh verification for a subject seen before (step or journey)."""
        if self.store.find_step(subject) is not None:
            return self.verify_step(
                VerificationRequest(subject=subject, trigger="manual", requested_by=requested_by)
            )
        if self.store.get_journey(subject) is not None:
            return self.verify_journey(
                VerificationRequest(
                    subject=subject,
                    subject_type=JOURNEY_SUBJECT,
                    trigger="manual",
                    requested_by=requested_by,
                )
            )
        raise UnknownSubject(subject)
