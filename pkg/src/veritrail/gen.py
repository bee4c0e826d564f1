"""Deterministic scenario generation: great-circle routes sampled at constant
speed, scalar sensor baselines, seeded fault injection and the event plan
that frames a journey.

Everything derives from a Scenario document plus a seed, so a committed
scenario file reproduces the same tracks, faults and envelopes forever.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Optional, Sequence

import numpy as np

from .ingest import IngestEnvelope, EpcisEvent, OBJECT_EVENT, format_rfc3339, parse_rfc3339
from .rules import EARTH_RADIUS_M, METERS_PER_DEG_LAT, haversine_m

FAULT_KINDS = ("gaussianNoise", "outlierSpikes", "detour", "thresholdBreach", "dropout")


class ScenarioError(Exception):
    pass


@dataclass
class DeviceSpec:
    """One simulated device; scalars carry a baseline level and sampling noise."""

    device_id: str
    kind: str  # "gps" | "temperature" | "humidity"
    base: float = 0.0
    sigma: float = 0.0

    def to_dict(self) -> dict:
        return {"deviceId": self.device_id, "kind": self.kind, "base": self.base, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, raw: dict) -> "DeviceSpec":
        return cls(
            device_id=raw["deviceId"],
            kind=raw["kind"],
            base=float(raw.get("base", 0.0)),
            sigma=float(raw.get("sigma", 0.0)),
        )


@dataclass
class FaultSpec:
    """One injected fault bound to a target device."""

    kind: str
    target_device: str
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "targetDevice": self.target_device, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, raw: dict) -> "FaultSpec":
        kind = raw.get("kind")
        if kind not in FAULT_KINDS:
            raise ScenarioError(f"unknown fault kind {kind!r}")
        return cls(kind=kind, target_device=raw["targetDevice"], params=dict(raw.get("params", {})))


@dataclass
class EventPlanEntry:
    """One planned envelope relative to the scenario start."""

    biz_step: str
    offset_min: float
    topic: str
    biz_location: str = ""
    action: str = "OBSERVE"
    item_attributes: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bizStep": self.biz_step,
            "offsetMin": self.offset_min,
            "topic": self.topic,
            "bizLocation": self.biz_location,
            "action": self.action,
            "itemAttributes": dict(self.item_attributes),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EventPlanEntry":
        return cls(
            biz_step=raw["bizStep"],
            offset_min=float(raw["offsetMin"]),
            topic=raw["topic"],
            biz_location=raw.get("bizLocation", ""),
            action=raw.get("action", "OBSERVE"),
            item_attributes=dict(raw.get("itemAttributes", {})),
        )


@dataclass
class Scenario:
    """Complete description of one synthetic journey."""

    name: str
    waypoints: list[tuple[float, float]]
    speed_mps: float
    sample_interval_sec: float
    start_time: datetime
    devices: list[DeviceSpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    events_plan: list[EventPlanEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "waypoints": [[lat, lon] for lat, lon in self.waypoints],
            "speedMps": self.speed_mps,
            "sampleIntervalSec": self.sample_interval_sec,
            "startTime": format_rfc3339(self.start_time),
            "devices": [d.to_dict() for d in self.devices],
            "faults": [f.to_dict() for f in self.faults],
            "eventsPlan": [e.to_dict() for e in self.events_plan],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        waypoints = [(float(lat), float(lon)) for lat, lon in raw["waypoints"]]
        if len(waypoints) < 2:
            raise ScenarioError("scenario needs at least two waypoints")
        speed = float(raw["speedMps"])
        interval = float(raw["sampleIntervalSec"])
        if speed <= 0 or interval <= 0:
            raise ScenarioError("speedMps and sampleIntervalSec must be positive")
        return cls(
            name=raw["name"],
            waypoints=waypoints,
            speed_mps=speed,
            sample_interval_sec=interval,
            start_time=parse_rfc3339(raw["startTime"]),
            devices=[DeviceSpec.from_dict(d) for d in raw.get("devices", [])],
            faults=[FaultSpec.from_dict(f) for f in raw.get("faults", [])],
            events_plan=[EventPlanEntry.from_dict(e) for e in raw.get("eventsPlan", [])],
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    def faults_for(self, device_id: str) -> list[FaultSpec]:
        return [f for f in self.faults if f.target_device == device_id]


@dataclass
class DeviceTrack:
    """Generated GPS samples for one device."""

    device_id: str
    samples: list[tuple[datetime, tuple[float, float]]]


@dataclass
class ScalarSeries:
    """Generated scalar samples for one device."""

    device_id: str
    kind: str
    samples: list[tuple[datetime, float]]


# -- great-circle interpolation ---------------------------------------------


def _to_unit(point: tuple[float, float]) -> np.ndarray:
    lat, lon = math.radians(point[0]), math.radians(point[1])
    return np.array(
        [math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)]
    )


def _to_latlon(vector: np.ndarray) -> tuple[float, float]:
    x, y, z = vector
    hyp = math.hypot(x, y)
    return math.degrees(math.atan2(z, hyp)), math.degrees(math.atan2(y, x))


def _slerp(u: np.ndarray, v: np.ndarray, fraction: float) -> np.ndarray:
    dot = float(np.clip(u @ v, -1.0, 1.0))
    omega = math.acos(dot)
    if omega < 1e-12:
        return u
    sin_omega = math.sin(omega)
    return (math.sin((1.0 - fraction) * omega) * u + math.sin(fraction * omega) * v) / sin_omega


class _Polyline:
    """Great-circle polyline with distance-parameterized lookup."""

    def __init__(self, waypoints: Sequence[tuple[float, float]]):
        self.points = [(float(lat), float(lon)) for lat, lon in waypoints]
        self.units = [_to_unit(p) for p in self.points]
        self.leg_lengths = [
            haversine_m(self.points[i], self.points[i + 1]) for i in range(len(self.points) - 1)
        ]
        self.total = sum(self.leg_lengths)

    def position_at(self, distance: float) -> tuple[float, float]:
        if distance <= 0.0:
            return self.points[0]
        if distance >= self.total:
            return self.points[-1]
        remaining = distance
        for i, leg in enumerate(self.leg_lengths):
            if remaining <= leg or i == len(self.leg_lengths) - 1:
                if leg == 0.0:
                    return self.points[i]
                fraction = min(1.0, remaining / leg)
                if fraction == 0.0:
                    return self.points[i]
                if fraction == 1.0:
                    return self.points[i + 1]
                return _to_latlon(_slerp(self.units[i], self.units[i + 1], fraction))
            remaining -= leg
        return self.points[-1]


def route_samples(
    waypoints: Sequence[tuple[float, float]],
    speed_mps: float,
    interval_sec: float,
    start_time: datetime,
) -> list[tuple[datetime, tuple[float, float]]]:
    """Sample a constant-speed ride along the waypoints.

    Samples sit on the interval grid from departure; the exact final waypoint
    is appended when the total travel time is not a grid multiple, so both
    endpoints always appear verbatim.
    """
    line = _Polyline(waypoints)
    if line.total == 0.0:
        raise ScenarioError("route has zero length")
    duration = line.total / speed_mps
    samples: list[tuple[datetime, tuple[float, float]]] = []
    count = int(math.floor(duration / interval_sec + 1e-9))
    for i in range(count + 1):
        t = i * interval_sec
        samples.append((start_time + timedelta(seconds=t), line.position_at(speed_mps * t)))
    if duration - count * interval_sec > 1e-9:
        samples.append((start_time + timedelta(seconds=duration), line.points[-1]))
    else:
        # Land the on-grid final sample exactly on the last waypoint.
        samples[-1] = (samples[-1][0], line.points[-1])
    return samples


def gen_route(scenario: Scenario, device_id: str = "gps-0", seed: int = 0) -> DeviceTrack:
    """Clean constant-speed track for one device.

    The route itself is deterministic; the seed only matters once faults are
    injected on top.
    """
    del seed  # route generation is noise-free
    return DeviceTrack(
        device_id=device_id,
        samples=route_samples(
            scenario.waypoints, scenario.speed_mps, scenario.sample_interval_sec, scenario.start_time
        ),
    )


def gen_scalar_series(
    scenario: Scenario, spec: DeviceSpec, seed: int = 0
) -> ScalarSeries:
    """Baseline scalar series on the route's sampling grid, with sensor noise."""
    grid = route_samples(
        scenario.waypoints, scenario.speed_mps, scenario.sample_interval_sec, scenario.start_time
    )
    rng = _device_rng(seed, spec.device_id)
    noise = rng.normal(0.0, spec.sigma, size=len(grid)) if spec.sigma > 0 else np.zeros(len(grid))
    samples = [(stamp, spec.base + float(noise[i])) for i, (stamp, _) in enumerate(grid)]
    return ScalarSeries(device_id=spec.device_id, kind=spec.kind, samples=samples)


# -- fault injection ----------------------------------------------------------


def _device_rng(seed: int, device_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(device_id.encode("utf-8"))])


def _meters_to_deg(d_north_m: float, d_east_m: float, lat: float) -> tuple[float, float]:
    dlat = d_north_m / METERS_PER_DEG_LAT
    dlon = d_east_m / (METERS_PER_DEG_LAT * math.cos(math.radians(lat)))
    return dlat, dlon


def _window(samples: Sequence[tuple[datetime, Any]], start_min: float, duration_min: float) -> list[int]:
    if not samples:
        return []
    t0 = samples[0][0]
    picked = []
    for i, (stamp, _) in enumerate(samples):
        offset = (stamp - t0).total_seconds() / 60.0
        if start_min <= offset < start_min + duration_min:
            picked.append(i)
    return picked


def _gps_noise(track: list, sigma_m: float, rng: np.random.Generator) -> list:
    out = []
    for stamp, (lat, lon) in track:
        dlat, dlon = _meters_to_deg(rng.normal(0.0, sigma_m), rng.normal(0.0, sigma_m), lat)
        out.append((stamp, (lat + dlat, lon + dlon)))
    return out


def _gps_spikes(track: list, rate: float, magnitude_m: float, rng: np.random.Generator) -> list:
    out = []
    for stamp, (lat, lon) in track:
        if rng.random() < rate:
            bearing = rng.uniform(0.0, 2.0 * math.pi)
            dlat, dlon = _meters_to_deg(
                magnitude_m * math.cos(bearing), magnitude_m * math.sin(bearing), lat
            )
            out.append((stamp, (lat + dlat, lon + dlon)))
        else:
            out.append((stamp, (lat, lon)))
    return out


def _gps_detour(track: list, insert_after_km: float, waypoints: list, speed: float, interval: float) -> list:
    if len(track) < 2:
        return list(track)
    cumulative = 0.0
    anchor = None
    for i in range(1, len(track)):
        cumulative += haversine_m(track[i - 1][1], track[i][1])
        if cumulative >= insert_after_km * 1000.0:
            anchor = i
            break
    if anchor is None:
        return list(track)
    stamp_a, position_a = track[anchor]
    loop = [position_a, *[(float(lat), float(lon)) for lat, lon in waypoints], position_a]
    loop_samples = route_samples(loop, speed, interval, stamp_a)
    inserted = loop_samples[1:]  # the anchor sample itself already exists
    shift = inserted[-1][0] - stamp_a
    out = list(track[: anchor + 1])
    out.extend(inserted)
    for stamp, position in track[anchor + 1 :]:
        out.append((stamp + shift, position))
    return out


def inject_faults(
    samples: Any,
    faults: Sequence[FaultSpec],
    seed: int,
) -> Any:
    """Apply faults to a DeviceTrack or ScalarSeries, deterministically per seed.

    Faults apply in list order.  Samples outside a windowed fault's window
    (and unspiked samples) come through bit-identical.
    """
    if isinstance(samples, DeviceTrack):
        track = list(samples.samples)
        rng = _device_rng(seed, samples.device_id)
        derived_interval = (
            (track[1][0] - track[0][0]).total_seconds() if len(track) > 1 else 60.0
        )
        derived_speed = (
            haversine_m(track[0][1], track[1][1]) / derived_interval if len(track) > 1 else 1.0
        )
        for fault in faults:
            p = fault.params
            if fault.kind == "gaussianNoise":
                track = _gps_noise(track, float(p["sigma"]), rng)
            elif fault.kind == "outlierSpikes":
                track = _gps_spikes(track, float(p["rate"]), float(p["magnitude"]), rng)
            elif fault.kind == "detour":
                track = _gps_detour(
                    track,
                    float(p["insertAfterKm"]),
                    list(p["waypoints"]),
                    float(p.get("speedMps", derived_speed)),
                    float(p.get("sampleIntervalSec", derived_interval)),
                )
            elif fault.kind == "dropout":
                gone = set(_window(track, float(p["startMin"]), float(p["durationMin"])))
                track = [s for i, s in enumerate(track) if i not in gone]
            elif fault.kind == "thresholdBreach":
                raise ScenarioError("thresholdBreach applies to scalar series only")
        return DeviceTrack(device_id=samples.device_id, samples=track)

    if isinstance(samples, ScalarSeries):
        series = list(samples.samples)
        rng = _device_rng(seed, samples.device_id)
        for fault in faults:
            p = fault.params
            if fault.kind == "gaussianNoise":
                noise = rng.normal(0.0, float(p["sigma"]), size=len(series))
                series = [(t, v + float(noise[i])) for i, (t, v) in enumerate(series)]
            elif fault.kind == "outlierSpikes":
                out = []
                for stamp, value in series:
                    if rng.random() < float(p["rate"]):
                        sign = 1.0 if rng.random() < 0.5 else -1.0
                        out.append((stamp, value + sign * float(p["magnitude"])))
                    else:
                        out.append((stamp, value))
                series = out
            elif fault.kind == "thresholdBreach":
                hit = set(_window(series, float(p["startMin"]), float(p["durationMin"])))
                series = [
                    (t, float(p["level"]) if i in hit else v) for i, (t, v) in enumerate(series)
                ]
            elif fault.kind == "dropout":
                gone = set(_window(series, float(p["startMin"]), float(p["durationMin"])))
                series = [s for i, s in enumerate(series) if i not in gone]
            elif fault.kind == "detour":
                raise ScenarioError("detour applies to GPS tracks only")
        return ScalarSeries(device_id=samples.device_id, kind=samples.kind, samples=series)

    raise TypeError("inject_faults expects a DeviceTrack or ScalarSeries")


def gen_device_samples(scenario: Scenario, spec: DeviceSpec, seed: int = 0):
    """Clean samples plus this device's faults, in one call."""
    if spec.kind == "gps":
        clean: Any = gen_route(scenario, spec.device_id, seed)
    else:
        clean = gen_scalar_series(scenario, spec, seed)
    return inject_faults(clean, scenario.faults_for(spec.device_id), seed)


# -- event plan ---------------------------------------------------------------


def gen_events(scenario: Scenario, journey_id: str, seed: int = 0) -> list[IngestEnvelope]:
    """Materialize the event plan as object-event envelopes for one journey.

    The plan is fully deterministic; the seed exists for signature symmetry
    with the samplers and is unused.
    """
    del seed
    if not scenario.events_plan:
        raise ScenarioError("scenario has an empty events plan")
    envelopes = []
    for entry in scenario.events_plan:
        event = EpcisEvent(
            event_type=OBJECT_EVENT,
            event_time=scenario.start_time + timedelta(minutes=entry.offset_min),
            biz_step=entry.biz_step,
            biz_location=entry.biz_location,
            source_party=entry.topic,
            action=entry.action,
            epc_list=[journey_id],
            item_attributes=dict(entry.item_attributes),
        )
        envelopes.append(IngestEnvelope(topic=entry.topic, event=event))
    return envelopes


# -- geometry helpers for scenarios and tests ---------------------------------


def corridor_polygon(
    waypoints: Sequence[tuple[float, float]],
    half_width_m: float,
    subdivisions: int = 12,
) -> list[tuple[float, float]]:
    """Closed ring buffering a polyline by half_width_m on each side.

    Densifies each leg, offsets perpendicular to the local bearing, and walks
    left side out, right side back.  Good for corridor geofences around
    generated routes.
    """
    line = _Polyline(waypoints)
    if line.total == 0.0:
        raise ScenarioError("cannot buffer a zero-length polyline")
    distances = [line.total * i / (subdivisions * (len(waypoints) - 1)) for i in range(subdivisions * (len(waypoints) - 1) + 1)]
    center = [line.position_at(d) for d in distances]
    left: list[tuple[float, float]] = []
    right: list[tuple[float, float]] = []
    for i, point in enumerate(center):
        if i == 0:
            ahead, behind = center[1], center[0]
        elif i == len(center) - 1:
            ahead, behind = center[-1], center[-2]
        else:
            ahead, behind = center[i + 1], center[i - 1]
        north = (ahead[0] - behind[0]) * METERS_PER_DEG_LAT
        east = (ahead[1] - behind[1]) * METERS_PER_DEG_LAT * math.cos(math.radians(point[0]))
        norm = math.hypot(north, east)
        if norm == 0.0:
            continue
        # Unit normal: rotate the heading 90 degrees counter-clockwise.
        n_north, n_east = -east / norm, north / norm
        dlat, dlon = _meters_to_deg(n_north * half_width_m, n_east * half_width_m, point[0])
        left.append((point[0] + dlat, point[1] + dlon))
        dlat, dlon = _meters_to_deg(-n_north * half_width_m, -n_east * half_width_m, point[0])
        right.append((point[0] + dlat, point[1] + dlon))
    return left + list(reversed(right))


def antipode(point: tuple[float, float]) -> tuple[float, float]:
    lat, lon = point
    return -lat, lon - 180.0 if lon > 0 else lon + 180.0


GREAT_CIRCLE_CIRCUMFERENCE_M = 2.0 * math.pi * EARTH_RADIUS_M
