"""GeoJSON export of step tracks: raw per-device lines, smoothed per-device
lines, the fused consensus track, and rule violations as point markers.

Coordinates follow GeoJSON order, [lon, lat].
"""

from __future__ import annotations

from datetime import datetime
from typing import Optional

from . import preprocess, rules
from .ingest import KIND_GPS, format_rfc3339, parse_rfc3339
from .model import StateStore, Step
from .verify import StepPipeline, UnknownSubject, VerificationManager

LAYERS = ("raw", "smoothed", "fused", "violations")


class NoGpsData(Exception):
    """The step has no position samples to export."""


def _line_feature(
    samples: list[preprocess.Sample], properties: dict
) -> dict:
    return {
        "type": "Feature",
        "geometry": {
            "type": "LineString",
            "coordinates": [[value[1], value[0]] for _, value in samples],
        },
        "properties": properties,
    }


def _point_feature(position: tuple[float, float], properties: dict) -> dict:
    return {
        "type": "Feature",
        "geometry": {"type": "Point", "coordinates": [position[1], position[0]]},
        "properties": properties,
    }


def _nearest_sample(
    samples: list[preprocess.Sample], stamp: datetime
) -> Optional[preprocess.Sample]:
    if not samples:
        return None
    return min(samples, key=lambda s: abs((s[0] - stamp).total_seconds()))


def _violation_features(
    results: list[rules.RuleResult], pipelines: list, step: Step
) -> list[dict]:
    fused: list[preprocess.Sample] = []
    for pipeline in pipelines:
        fused.extend(pipeline.fused)
    fused.sort(key=lambda s: s[0])
    features = []
    for result in results:
        if result.verdict == rules.OKAY:
            continue
        for violation in result.violations:
            properties = {
                "layer": "violations",
                "ruleName": result.rule_name,
                "severity": result.verdict,
                "detail": violation.detail,
                "magnitude": violation.magnitude,
                "ref": violation.ref,
                "stepId": step.step_id,
            }
            stamps = violation.ref.split("..")
            try:
                anchor = parse_rfc3339(stamps[0])
            except ValueError:
                continue  # non-temporal refs (step ids, attributes) have no geometry
            sample = _nearest_sample(fused, anchor)
            if sample is not None:
                features.append(_point_feature((sample[1][0], sample[1][1]), properties))
    return features


def export_step_geojson(
    store: StateStore,
    manager: VerificationManager,
    step_id: str,
    layer: str,
) -> dict:
    """FeatureCollection for one layer of a step's position data."""
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}")
    step = store.find_step(step_id)
    if step is None:
        raise UnknownSubject(step_id)
    journey = store.get_journey(step.journey_id)
    policy = store.policy_for(journey.product_type if journey else None, step.phase)
    pipeline: StepPipeline = manager.preprocess_step(step, policy)
    gps = pipeline.for_kind(KIND_GPS)
    if not gps or not any(p.raw for p in gps):
        raise NoGpsData(step_id)

    features: list[dict] = []
    if layer == "raw":
        for kind_pipeline in gps:
            for device, samples in sorted(kind_pipeline.raw.items()):
                features.append(
                    _line_feature(
                        samples,
                        {
                            "layer": "raw",
                            "device": device,
                            "topic": kind_pipeline.topic,
                            "samples": len(samples),
                        },
                    )
                )
    elif layer == "smoothed":
        config = preprocess.PreprocessConfig.from_dict(policy.preprocess if policy else None)
        for kind_pipeline in gps:
            for device, samples in sorted(kind_pipeline.raw.items()):
                kept, _ = preprocess.speed_filter(
                    [(t, (v[0], v[1])) for t, v in samples], config.v_max_mps
                )
                smoothed = preprocess.kalman_smooth(
                    [(t, p) for t, p in kept], preprocess.make_filter(KIND_GPS, config)
                )
                features.append(
                    _line_feature(
                        smoothed,
                        {"layer": "smoothed", "device": device, "topic": kind_pipeline.topic},
                    )
                )
    elif layer == "fused":
        for kind_pipeline in gps:
            features.append(
                _line_feature(
                    kind_pipeline.fused,
                    {
                        "layer": "fused",
                        "mode": kind_pipeline.mode,
                        "topic": kind_pipeline.topic,
                        "devices": list(kind_pipeline.devices),
                    },
                )
            )
    else:
        if policy is None:
            results: list[rules.RuleResult] = []
        else:
            results, _, _ = manager._run_step_rules(policy, step, pipeline)
        features = _violation_features(results, gps, step)

    return {
        "type": "FeatureCollection",
        "features": features,
        "properties": {
            "stepId": step.step_id,
            "journeyId": step.journey_id,
            "phase": step.phase,
            "layer": layer,
            "generatedFrom": format_rfc3339(step.start_time) if step.start_time else None,
        },
    }
