"""Policy rules: pure functions from preprocessed series/tracks plus
parameters to RuleResult verdicts.

Geodesic primitives live here too (haversine distance, point-in-polygon,
point-to-polyline distance).  Polygon containment treats lon/lat as planar
x/y, which is fine for the facility- and corridor-scale fences this targets;
distances always go through the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Optional, Sequence

from .ingest import format_rfc3339

EARTH_RADIUS_M = 6371008.8  # IUGG mean radius
METERS_PER_DEG_LAT = math.pi * EARTH_RADIUS_M / 180.0

OKAY = "okay"
WARNING = "warning"
ALERT = "alert"
VERDICT_ORDER = {OKAY: 0, WARNING: 1, ALERT: 2}
SEVERITIES = (WARNING, ALERT)


class InvalidRuleParams(Exception):
    """Rule parameter object fails validation."""


class InvalidPolygon(InvalidRuleParams):
    """Geofence ring is degenerate or malformed."""


class EmptySeries(Exception):
    """Raised by low-level series math given no samples."""


def max_verdict(verdicts: Sequence[str]) -> str:
    """Most severe verdict in the sequence; empty means okay."""
    worst = OKAY
    for verdict in verdicts:
        if verdict not in VERDICT_ORDER:
            raise ValueError(f"unknown verdict {verdict!r}")
        if VERDICT_ORDER[verdict] > VERDICT_ORDER[worst]:
            worst = verdict
    return worst


# -- geodesy -------------------------------------------------------------


def haversine_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between two (lat, lon) points."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def _local_xy(point: tuple[float, float], origin: tuple[float, float]) -> tuple[float, float]:
    # Equirectangular projection around origin, good enough for sub-degree spans.
    x = (point[1] - origin[1]) * METERS_PER_DEG_LAT * math.cos(math.radians(origin[0]))
    y = (point[0] - origin[0]) * METERS_PER_DEG_LAT
    return x, y


def point_to_segment_m(
    p: tuple[float, float], a: tuple[float, float], b: tuple[float, float]
) -> float:
    """Distance in meters from p to the segment a-b (local planar approximation)."""
    px, py = _local_xy(p, p)
    ax, ay = _local_xy(a, p)
    bx, by = _local_xy(b, p)
    dx, dy = bx - ax, by - ay
    length_sq = dx * dx + dy * dy
    if length_sq == 0.0:
        return math.hypot(px - ax, py - ay)
    t = max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / length_sq))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def point_to_polyline_m(p: tuple[float, float], line: Sequence[tuple[float, float]]) -> float:
    """Distance in meters from p to the nearest segment of an open polyline."""
    if not line:
        raise EmptySeries("empty polyline")
    if len(line) == 1:
        return haversine_m(p, line[0])
    return min(point_to_segment_m(p, line[i], line[i + 1]) for i in range(len(line) - 1))


def normalize_ring(ring: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    """Validate a polygon ring and return it open (no repeated last vertex)."""
    points = [(float(lat), float(lon)) for lat, lon in ring]
    if len(points) >= 2 and points[0] == points[-1]:
        points = points[:-1]
    if len(points) < 3:
        raise InvalidPolygon("polygon needs at least 3 distinct vertices")
    area2 = 0.0
    for i, (lat1, lon1) in enumerate(points):
        lat2, lon2 = points[(i + 1) % len(points)]
        area2 += lon1 * lat2 - lon2 * lat1
    if area2 == 0.0:
        raise InvalidPolygon("polygon is degenerate (zero area)")
    return points


def _on_segment(p: tuple[float, float], a: tuple[float, float], b: tuple[float, float]) -> bool:
    cross = (b[1] - a[1]) * (p[0] - a[0]) - (b[0] - a[0]) * (p[1] - a[1])
    if abs(cross) > 1e-12:
        return False
    return (
        min(a[0], b[0]) - 1e-12 <= p[0] <= max(a[0], b[0]) + 1e-12
        and min(a[1], b[1]) - 1e-12 <= p[1] <= max(a[1], b[1]) + 1e-12
    )


def point_in_polygon(point: tuple[float, float], ring: Sequence[tuple[float, float]]) -> bool:
    """Even-odd ray casting on (lat, lon) treated as planar; boundary counts inside."""
    points = normalize_ring(ring)
    lat, lon = float(point[0]), float(point[1])
    inside = False
    n = len(points)
    for i in range(n):
        a = points[i]
        b = points[(i + 1) % n]
        if _on_segment((lat, lon), a, b):
            return True
        # Cast the ray in +lon direction; the half-open vertex rule keeps
        # shared vertices from double-counting.
        if (a[0] > lat) != (b[0] > lat):
            lon_cross = a[1] + (lat - a[0]) * (b[1] - a[1]) / (b[0] - a[0])
            if lon < lon_cross:
                inside = not inside
    return inside


def distance_to_ring_m(point: tuple[float, float], ring: Sequence[tuple[float, float]]) -> float:
    """Meters from point to the polygon boundary (0 if on it)."""
    points = normalize_ring(ring)
    closed = list(points) + [points[0]]
    return point_to_polyline_m(point, closed)


# -- result types --------------------------------------------------------


@dataclass
class Violation:
    """One rule finding: what was violated, where/when, and by how much."""

    ref: str
    detail: str
    magnitude: float = 0.0

    def to_dict(self) -> dict:
        return {"ref": self.ref, "detail": self.detail, "magnitude": self.magnitude}


@dataclass
class RuleResult:
    """Outcome of one rule evaluation."""

    rule_name: str
    verdict: str
    violations: list[Violation] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ruleName": self.rule_name,
            "verdict": self.verdict,
            "violations": [v.to_dict() for v in self.violations],
            "metrics": dict(self.metrics),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RuleResult":
        return cls(
            rule_name=raw["ruleName"],
            verdict=raw["verdict"],
            violations=[Violation(**v) for v in raw.get("violations", [])],
            metrics=dict(raw.get("metrics", {})),
            notes=list(raw.get("notes", [])),
        )


def _no_data(rule_name: str, what: str) -> RuleResult:
    return RuleResult(rule_name, OKAY, notes=[f"no {what}, nothing to evaluate"])


def _require_severity(severity: str) -> str:
    if severity not in SEVERITIES:
        raise InvalidRuleParams(f"severity must be one of {SEVERITIES}, got {severity!r}")
    return severity


def _positive(params: dict, key: str, required: bool = True) -> Optional[float]:
    if key not in params or params[key] is None:
        if required:
            raise InvalidRuleParams(f"missing required param {key!r}")
        return None
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
        raise InvalidRuleParams(f"param {key!r} must be a positive number")
    return float(value)


def _number(params: dict, key: str) -> Optional[float]:
    if key not in params or params[key] is None:
        return None
    value = params[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidRuleParams(f"param {key!r} must be a number")
    return float(value)


def _latlon(params: dict, key: str, required: bool = True) -> Optional[tuple[float, float]]:
    if key not in params or params[key] is None:
        if required:
            raise InvalidRuleParams(f"missing required param {key!r}")
        return None
    value = params[key]
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
    ):
        raise InvalidRuleParams(f"param {key!r} must be a [lat, lon] pair")
    lat, lon = float(value[0]), float(value[1])
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise InvalidRuleParams(f"param {key!r} coordinates out of range")
    return lat, lon


# -- threshold rule ------------------------------------------------------

MODE_TRAPEZOID = "trapezoid"
MODE_RECTANGLE = "rectangle"


@dataclass
class ThresholdParams:
    """Bounds for a scalar reading kind plus optional cumulative-severity limit."""

    kind: str = "temperature"
    t_max: Optional[float] = None
    t_min: Optional[float] = None
    cumulative_limit: Optional[float] = None
    sampling_mode: str = MODE_TRAPEZOID
    nominal_gap_min: Optional[float] = None
    unit: str = ""

    @classmethod
    def from_dict(cls, params: dict) -> "ThresholdParams":
        t_max = _number(params, "tMax")
        t_min = _number(params, "tMin")
        if t_max is None and t_min is None:
            raise InvalidRuleParams("threshold needs tMax and/or tMin")
        if t_max is not None and t_min is not None and t_min >= t_max:
            raise InvalidRuleParams("tMin must be below tMax")
        mode = params.get("samplingMode", MODE_TRAPEZOID)
        if mode not in (MODE_TRAPEZOID, MODE_RECTANGLE):
            raise InvalidRuleParams(f"samplingMode must be trapezoid or rectangle, got {mode!r}")
        return cls(
            kind=str(params.get("kind", "temperature")),
            t_max=t_max,
            t_min=t_min,
            cumulative_limit=_positive(params, "cumulativeLimit", required=False),
            sampling_mode=mode,
            nominal_gap_min=_positive(params, "nominalGapMin", required=False),
            unit=str(params.get("unit", "")),
        )


def excess(value: float, t_max: Optional[float], t_min: Optional[float]) -> float:
    """How far a value sits outside the [t_min, t_max] band; 0 inside."""
    over = max(0.0, value - t_max) if t_max is not None else 0.0
    under = max(0.0, t_min - value) if t_min is not None else 0.0
    return over + under


def cumulative_severity(
    samples: Sequence[tuple[datetime, float]],
    t_max: Optional[float],
    t_min: Optional[float] = None,
    mode: str = MODE_TRAPEZOID,
    limit: Optional[float] = None,
    nominal_gap_min: Optional[float] = None,
) -> tuple[float, list[float], Optional[int]]:
    """Accumulated excess-times-minutes over a series.

    Trapezoid mode integrates (E_i + E_{i+1})/2 over each gap and returns one
    contribution per segment; rectangle mode charges E_i for the gap preceding
    sample i (the first sample's gap falls back to nominal_gap_min, else to
    the first observed gap) and returns one contribution per sample.  The
    third return is the index of the first sample at which the running total
    strictly exceeds limit, if any.
    """
    if not samples:
        raise EmptySeries("cumulative severity of empty series")
    values = [excess(v, t_max, t_min) for _, v in samples]
    times = [t for t, _ in samples]
    contributions: list[float] = []
    crossing: Optional[int] = None
    running = 0.0

    if mode == MODE_TRAPEZOID:
        for i in range(len(samples) - 1):
            gap_min = (times[i + 1] - times[i]).total_seconds() / 60.0
            if gap_min < 0:
                raise ValueError("samples must be time-ordered")
            contribution = (values[i] + values[i + 1]) / 2.0 * gap_min
            contributions.append(contribution)
            running += contribution
            if limit is not None and crossing is None and running > limit:
                crossing = i + 1
    elif mode == MODE_RECTANGLE:
        first_gap = nominal_gap_min
        if first_gap is None and len(samples) > 1:
            first_gap = (times[1] - times[0]).total_seconds() / 60.0
        for i in range(len(samples)):
            if i == 0:
                gap_min = first_gap or 0.0
            else:
                gap_min = (times[i] - times[i - 1]).total_seconds() / 60.0
                if gap_min < 0:
                    raise ValueError("samples must be time-ordered")
            contribution = values[i] * gap_min
            contributions.append(contribution)
            running += contribution
            if limit is not None and crossing is None and running > limit:
                crossing = i
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return running, contributions, crossing


def rule_threshold(
    samples: Sequence[tuple[datetime, float]],
    params: ThresholdParams,
    severity: str = ALERT,
) -> RuleResult:
    """Fixed band check, optionally with a cumulative-severity limit.

    Without a cumulative limit any out-of-band sample drives the verdict.
    With one, the verdict follows the cumulative crossing alone and the
    out-of-band samples stay recorded as informational violations.
    """
    _require_severity(severity)
    if not samples:
        return _no_data("threshold", f"{params.kind} samples")
    ordered = sorted(samples, key=lambda s: s[0])

    violations: list[Violation] = []
    for stamp, value in ordered:
        e = excess(value, params.t_max, params.t_min)
        if e > 0.0:
            bound = params.t_max if (params.t_max is not None and value > params.t_max) else params.t_min
            side = "above max" if (params.t_max is not None and value > params.t_max) else "below min"
            violations.append(
                Violation(
                    ref=format_rfc3339(stamp),
                    detail=f"value {value:g}{params.unit} {side} bound {bound:g}{params.unit}",
                    magnitude=e,
                )
            )
    metrics: dict[str, float] = {
        "sampleCount": float(len(ordered)),
        "flaggedCount": float(len(violations)),
    }

    if params.cumulative_limit is None:
        verdict = severity if violations else OKAY
        return RuleResult("threshold", verdict, violations, metrics)

    total, _, crossing = cumulative_severity(
        ordered,
        params.t_max,
        params.t_min,
        mode=params.sampling_mode,
        limit=params.cumulative_limit,
        nominal_gap_min=params.nominal_gap_min,
    )
    metrics["cumulativeSeverity"] = total
    notes: list[str] = []
    if crossing is not None:
        metrics["crossingIndex"] = float(crossing)
        stamp = ordered[crossing][0]
        violations.append(
            Violation(
                ref=format_rfc3339(stamp),
                detail=(
                    f"cumulative severity {total:g} exceeds limit "
                    f"{params.cumulative_limit:g} ({params.sampling_mode} accumulation)"
                ),
                magnitude=total - params.cumulative_limit,
            )
        )
        verdict = severity
    else:
        verdict = OKAY
        if violations:
            notes.append("out-of-band samples present but cumulative limit not exceeded")
    return RuleResult("threshold", verdict, violations, metrics, notes)


# -- geofence rule -------------------------------------------------------


@dataclass
class GeofenceParams:
    """Corridor polygon plus optional start/end proximity checks."""

    polygon: list[tuple[float, float]]
    start_center: Optional[tuple[float, float]] = None
    end_center: Optional[tuple[float, float]] = None
    start_radius_m: Optional[float] = None
    end_radius_m: Optional[float] = None

    @classmethod
    def from_dict(cls, params: dict) -> "GeofenceParams":
        raw = params.get("polygon")
        if not isinstance(raw, (list, tuple)):
            raise InvalidRuleParams("geofence needs a polygon vertex list")
        try:
            ring = normalize_ring(raw)
        except (TypeError, ValueError) as exc:
            raise InvalidRuleParams(f"bad polygon: {exc}") from exc
        start_center = _latlon(params, "startCenter", required=False)
        end_center = _latlon(params, "endCenter", required=False)
        start_radius = _positive(params, "startRadiusM", required=False)
        end_radius = _positive(params, "endRadiusM", required=False)
        if (start_center is None) != (start_radius is None):
            raise InvalidRuleParams("startCenter and startRadiusM go together")
        if (end_center is None) != (end_radius is None):
            raise InvalidRuleParams("endCenter and endRadiusM go together")
        return cls(ring, start_center, end_center, start_radius, end_radius)


def rule_geofence(
    track: Sequence[tuple[datetime, tuple[float, float]]],
    params: GeofenceParams,
    severity: str = ALERT,
) -> RuleResult:
    """Every sample must sit inside the polygon; endpoints near their centers."""
    _require_severity(severity)
    ring = normalize_ring(params.polygon)
    if not track:
        return _no_data("geofence", "position samples")
    ordered = sorted(track, key=lambda s: s[0])

    violations: list[Violation] = []
    max_outside = 0.0
    for stamp, position in ordered:
        if not point_in_polygon(position, ring):
            distance = distance_to_ring_m(position, ring)
            max_outside = max(max_outside, distance)
            violations.append(
                Violation(
                    ref=format_rfc3339(stamp),
                    detail=f"position outside corridor by {distance:.1f} m",
                    magnitude=distance,
                )
            )
    if params.start_center is not None and params.start_radius_m is not None:
        stamp, position = ordered[0]
        distance = haversine_m(position, params.start_center)
        if distance > params.start_radius_m:
            violations.append(
                Violation(
                    ref=format_rfc3339(stamp),
                    detail=(
                        f"first sample {distance:.1f} m from start point, "
                        f"allowed {params.start_radius_m:g} m"
                    ),
                    magnitude=distance - params.start_radius_m,
                )
            )
    if params.end_center is not None and params.end_radius_m is not None:
        stamp, position = ordered[-1]
        distance = haversine_m(position, params.end_center)
        if distance > params.end_radius_m:
            violations.append(
                Violation(
                    ref=format_rfc3339(stamp),
                    detail=(
                        f"last sample {distance:.1f} m from end point, "
                        f"allowed {params.end_radius_m:g} m"
                    ),
                    magnitude=distance - params.end_radius_m,
                )
            )
    metrics = {
        "sampleCount": float(len(ordered)),
        "outsideCount": float(sum(1 for v in violations if "corridor" in v.detail)),
        "maxOutsideM": max_outside,
    }
    return RuleResult("geofence", severity if violations else OKAY, violations, metrics)


# -- backtrack rule ------------------------------------------------------


@dataclass
class BacktrackParams:
    """Destination plus the recession tolerance that separates noise from detours."""

    destination: tuple[float, float]
    epsilon_m: float
    min_consecutive: int = 3

    @classmethod
    def from_dict(cls, params: dict) -> "BacktrackParams":
        destination = _latlon(params, "destination")
        epsilon = _positive(params, "epsilonM")
        min_consecutive = params.get("minConsecutive", 3)
        if not isinstance(min_consecutive, int) or isinstance(min_consecutive, bool) or min_consecutive < 1:
            raise InvalidRuleParams("minConsecutive must be a positive integer")
        return cls(destination, epsilon, min_consecutive)


def rule_backtrack(
    track: Sequence[tuple[datetime, tuple[float, float]]],
    params: BacktrackParams,
    severity: str = ALERT,
) -> RuleResult:
    """Flag sustained movement away from the destination.

    A sample recedes when its distance to the destination exceeds the best
    (minimum) distance seen so far by more than epsilon; min_consecutive
    receding samples in a row form one violation run.
    """
    _require_severity(severity)
    if not track:
        return _no_data("backtrack", "position samples")
    ordered = sorted(track, key=lambda s: s[0])

    runs: list[tuple[int, int, float]] = []  # (start index, end index, max excess)
    best = math.inf
    run_start: Optional[int] = None
    run_max = 0.0
    for i, (_, position) in enumerate(ordered):
        distance = haversine_m(position, params.destination)
        receding = distance > best + params.epsilon_m
        if receding:
            if run_start is None:
                run_start = i
                run_max = 0.0
            run_max = max(run_max, distance - best)
        else:
            if run_start is not None and i - run_start >= params.min_consecutive:
                runs.append((run_start, i - 1, run_max))
            run_start = None
        best = min(best, distance)
    if run_start is not None and len(ordered) - run_start >= params.min_consecutive:
        runs.append((run_start, len(ordered) - 1, run_max))

    violations = [
        Violation(
            ref=f"{format_rfc3339(ordered[start][0])}..{format_rfc3339(ordered[end][0])}",
            detail=(
                f"moved {magnitude:.1f} m back from the destination over "
                f"{end - start + 1} consecutive samples"
            ),
            magnitude=magnitude,
        )
        for start, end, magnitude in runs
    ]
    metrics = {
        "sampleCount": float(len(ordered)),
        "runCount": float(len(runs)),
        "maxRecessionM": max((m for _, _, m in runs), default=0.0),
    }
    return RuleResult("backtrack", severity if violations else OKAY, violations, metrics)


# -- handover rule -------------------------------------------------------


@dataclass
class HandoverParams:
    """Allowed custody-gap window between a departure and the next arrival."""

    max_gap_min: float
    min_gap_min: float = 0.0

    @classmethod
    def from_dict(cls, params: dict) -> "HandoverParams":
        max_gap = _positive(params, "maxGapMin")
        min_gap = _number(params, "minGapMin") or 0.0
        if min_gap < 0 or min_gap >= max_gap:
            raise InvalidRuleParams("minGapMin must be in [0, maxGapMin)")
        return cls(max_gap, min_gap)


def rule_handover(
    depart: Optional[datetime],
    arrive: Optional[datetime],
    params: HandoverParams,
    severity: str = ALERT,
    ref: str = "handover",
) -> RuleResult:
    """Check the custody gap between one party's departure and the next's arrival."""
    _require_severity(severity)
    if depart is None or arrive is None:
        missing = "departure" if depart is None else "arrival"
        return RuleResult(
            "handoverTime",
            WARNING,
            [Violation(ref=ref, detail=f"missing {missing} counterpart event", magnitude=0.0)],
            notes=["handover incomplete, counterpart event not recorded"],
        )
    gap_min = (arrive - depart).total_seconds() / 60.0
    metrics = {"gapMin": gap_min}
    if gap_min < 0:
        return RuleResult(
            "handoverTime",
            ALERT,
            [
                Violation(
                    ref=ref,
                    detail=f"arrival precedes departure by {-gap_min:.1f} min",
                    magnitude=-gap_min,
                )
            ],
            metrics,
        )
    if gap_min > params.max_gap_min:
        violation = Violation(
            ref=ref,
            detail=f"custody gap {gap_min:.1f} min exceeds allowed {params.max_gap_min:g} min",
            magnitude=gap_min - params.max_gap_min,
        )
        return RuleResult("handoverTime", severity, [violation], metrics)
    if gap_min < params.min_gap_min:
        violation = Violation(
            ref=ref,
            detail=f"custody gap {gap_min:.1f} min below minimum {params.min_gap_min:g} min",
            magnitude=params.min_gap_min - gap_min,
        )
        return RuleResult("handoverTime", severity, [violation], metrics)
    return RuleResult("handoverTime", OKAY, [], metrics)


# -- shipment timeout rule ------------------------------------------------


@dataclass
class TimeoutParams:
    """Plausible duration window for a completed step, in minutes."""

    min_duration_min: float
    max_duration_min: float

    @classmethod
    def from_dict(cls, params: dict) -> "TimeoutParams":
        minimum = _positive(params, "minDurationMin")
        maximum = _positive(params, "maxDurationMin")
        if minimum >= maximum:
            raise InvalidRuleParams("minDurationMin must be below maxDurationMin")
        return cls(minimum, maximum)


def rule_shipment_timeout(
    start: Optional[datetime],
    end: Optional[datetime],
    params: TimeoutParams,
    severity: str = ALERT,
    ref: str = "step",
) -> RuleResult:
    """Completed steps must take a plausible amount of time, bounds inclusive."""
    _require_severity(severity)
    if start is None:
        return RuleResult(
            "shipmentTimeout",
            WARNING,
            [Violation(ref=ref, detail="step has no start event", magnitude=0.0)],
            notes=["duration unknown"],
        )
    if end is None:
        return RuleResult(
            "shipmentTimeout",
            WARNING,
            [Violation(ref=ref, detail="step still open, no end event", magnitude=0.0)],
            notes=["duration unknown"],
        )
    duration_min = (end - start).total_seconds() / 60.0
    metrics = {"durationMin": duration_min}
    if duration_min < params.min_duration_min:
        violation = Violation(
            ref=ref,
            detail=(
                f"implausibly short: {duration_min:.1f} min against a minimum of "
                f"{params.min_duration_min:g} min"
            ),
            magnitude=params.min_duration_min - duration_min,
        )
        return RuleResult("shipmentTimeout", severity, [violation], metrics)
    if duration_min > params.max_duration_min:
        violation = Violation(
            ref=ref,
            detail=(
                f"delayed: {duration_min:.1f} min against a maximum of "
                f"{params.max_duration_min:g} min"
            ),
            magnitude=duration_min - params.max_duration_min,
        )
        return RuleResult("shipmentTimeout", severity, [violation], metrics)
    return RuleResult("shipmentTimeout", OKAY, [], metrics)


# -- attribute consistency params (evaluation lives in verify) ------------


@dataclass
class ConsistencyParams:
    """Numeric tolerance for cross-stakeholder claim comparison."""

    numeric_tolerance: float = 0.0
    attribute_tolerances: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, params: dict) -> "ConsistencyParams":
        tolerance = _number(params, "numericTolerance")
        if tolerance is None:
            tolerance = 0.0
        if tolerance < 0:
            raise InvalidRuleParams("numericTolerance must be >= 0")
        per_attribute = params.get("attributeTolerances", {})
        if not isinstance(per_attribute, dict):
            raise InvalidRuleParams("attributeTolerances must be an object")
        parsed: dict[str, float] = {}
        for key, value in per_attribute.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise InvalidRuleParams(f"attributeTolerances[{key!r}] must be >= 0")
            parsed[str(key)] = float(value)
        return cls(tolerance, parsed)


RULE_PARAM_TYPES: dict[str, Any] = {
    "threshold": ThresholdParams,
    "geofence": GeofenceParams,
    "backtrack": BacktrackParams,
    "handoverTime": HandoverParams,
    "shipmentTimeout": TimeoutParams,
    "attributeConsistency": ConsistencyParams,
}
