"""Sensor-series preprocessing: outlier removal, Kalman smoothing and
multi-device fusion.

Two paths exist on purpose.  A single device per reading kind gets the
cleaning chain (IQR or speed filter, then a Kalman smoother).  Several
devices get fused frame by frame inside the filter instead: each frame's
readings are combined into one pseudo-measurement, either equal-weight or
weighted by Mahalanobis distance to the filter's prediction so that
implausible readings lose influence.  Per-device reliability scores feed the
weights and are nudged up or down after every fused frame.

Scalars (temperature, humidity) run a 1-D random-walk filter in plain float
arithmetic; GPS runs a 4-state constant-velocity filter on (lat, lon) in
degrees via numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence, Union

import numpy as np

from .rules import METERS_PER_DEG_LAT, haversine_m

Sample = tuple[datetime, tuple[float, ...]]

DEFAULT_V_MAX_MPS = 42.0
DEFAULT_IQR_K = 1.5
DEFAULT_ALPHA = 0.05
DEFAULT_TAU = 3.0


class PreprocessError(Exception):
    pass


class SingularInnovation(PreprocessError):
    """Innovation covariance not invertible; measurement noise set to zero?"""


@dataclass
class PreprocessConfig:
    """Tunables for the cleaning and fusion chain.

    GPS noise terms are in degrees (r: variance of one coordinate, q:
    acceleration intensity); scalar terms are in the reading's own unit.
    """

    iqr_k: float = DEFAULT_IQR_K
    v_max_mps: float = DEFAULT_V_MAX_MPS
    frame_window_sec: float = 600.0
    scalar_q: float = 1e-4
    scalar_r: float = 0.25
    gps_q: float = 2e-11
    gps_r: float = 7.3e-8
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU
    initial_reliability: float = 1.0
    device_r: dict[str, float] = field(default_factory=dict)

    _KEYS = {
        "iqrK": "iqr_k",
        "vMaxMps": "v_max_mps",
        "frameWindowSec": "frame_window_sec",
        "scalarQ": "scalar_q",
        "scalarR": "scalar_r",
        "gpsQ": "gps_q",
        "gpsR": "gps_r",
        "alpha": "alpha",
        "tau": "tau",
        "initialReliability": "initial_reliability",
        "deviceR": "device_r",
    }

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "PreprocessConfig":
        config = cls()
        for key, value in (raw or {}).items():
            attr = cls._KEYS.get(key)
            if attr is None:
                raise ValueError(f"unknown preprocess option {key!r}")
            setattr(config, attr, dict(value) if attr == "device_r" else float(value))
        return config

    def r_for(self, device_id: str, kind: str) -> float:
        default = self.gps_r if kind == "gps" else self.scalar_r
        return float(self.device_r.get(device_id, default))


def normalize_series(samples: Sequence[Sample]) -> tuple[list[Sample], list[tuple[Sample, str]]]:
    """Time-order a series and drop same-timestamp duplicates (latest wins)."""
    ordered = sorted(samples, key=lambda s: s[0])
    kept: list[Sample] = []
    rejected: list[tuple[Sample, str]] = []
    for sample in ordered:
        if kept and sample[0] == kept[-1][0]:
            rejected.append((kept[-1], "duplicate timestamp"))
            kept[-1] = sample
        else:
            kept.append(sample)
    return kept, rejected


# -- outlier filters -------------------------------------------------------


def iqr_filter(
    samples: Sequence[tuple[datetime, float]], k: float = DEFAULT_IQR_K
) -> tuple[list[tuple[datetime, float]], list[tuple[tuple[datetime, float], str]]]:
    """Tukey fence filter on scalar values.

    Quartiles use linear interpolation.  Fewer than 4 samples pass through
    untouched since quartiles are meaningless there.
    """
    if len(samples) < 4:
        return list(samples), []
    values = np.array([v for _, v in samples], dtype=float)
    q1, q3 = np.percentile(values, [25.0, 75.0])
    iqr = q3 - q1
    low, high = q1 - k * iqr, q3 + k * iqr
    kept: list[tuple[datetime, float]] = []
    removed: list[tuple[tuple[datetime, float], str]] = []
    for sample in samples:
        if low <= sample[1] <= high:
            kept.append(sample)
        else:
            removed.append((sample, f"outside IQR fence [{low:g}, {high:g}]"))
    return kept, removed


def speed_filter(
    track: Sequence[tuple[datetime, tuple[float, float]]],
    v_max_mps: float = DEFAULT_V_MAX_MPS,
) -> tuple[
    list[tuple[datetime, tuple[float, float]]],
    list[tuple[tuple[datetime, tuple[float, float]], str]],
]:
    """Drop GPS samples that imply impossible speed from the last kept sample.

    Greedy forward scan: the first sample anchors, every following sample is
    judged against the most recent kept one.  Non-positive time deltas are
    rejected outright.
    """
    if not track:
        return [], []
    ordered = sorted(track, key=lambda s: s[0])
    kept = [ordered[0]]
    removed: list[tuple[tuple[datetime, tuple[float, float]], str]] = []
    for sample in ordered[1:]:
        dt = (sample[0] - kept[-1][0]).total_seconds()
        if dt <= 0:
            reason = "zero dt (duplicate timestamp)" if dt == 0 else "non-increasing timestamp"
            removed.append((sample, reason))
            continue
        speed = haversine_m(sample[1], kept[-1][1]) / dt
        if speed > v_max_mps:
            removed.append((sample, f"implied speed {speed:.1f} m/s exceeds {v_max_mps:g} m/s"))
        else:
            kept.append(sample)
    return kept, removed


# -- Kalman filters --------------------------------------------------------


class ScalarKalman:
    """Random-walk filter for one scalar channel.

    State is the value itself; process noise q grows the variance linearly
    with elapsed seconds.  Plain float arithmetic, no matrices needed.
    """

    def __init__(self, q: float, r: float):
        if q < 0 or r < 0:
            raise ValueError("noise terms must be >= 0")
        self.q = q
        self.r = r
        self.x: Optional[float] = None
        self.p = 0.0

    def initialize(self, z: tuple[float, ...]) -> None:
        self.x = float(z[0])
        self.p = self.r if self.r > 0 else 1.0

    def predict(self, dt: float) -> None:
        if self.x is None:
            raise PreprocessError("filter not initialized")
        self.p += self.q * max(dt, 0.0)

    def innovation_variance(self, r: Optional[float] = None) -> float:
        s = self.p + (self.r if r is None else r)
        if s <= 0.0:
            raise SingularInnovation(f"innovation variance {s:g}")
        return s

    def mahalanobis(self, z: tuple[float, ...], r: Optional[float] = None) -> float:
        assert self.x is not None
        return abs(float(z[0]) - self.x) / math.sqrt(self.innovation_variance(r))

    def update(self, z: tuple[float, ...], r: Optional[float] = None) -> None:
        assert self.x is not None
        r_eff = self.r if r is None else r
        s = self.innovation_variance(r_eff)
        gain = self.p / s
        self.x += gain * (float(z[0]) - self.x)
        # Joseph form keeps the variance non-negative under roundoff.
        self.p = (1.0 - gain) ** 2 * self.p + gain * gain * r_eff

    def measurement(self) -> tuple[float, ...]:
        assert self.x is not None
        return (self.x,)

    def covariance(self) -> np.ndarray:
        return np.array([[self.p]])


class GpsKalman:
    """Constant-velocity filter over (lat, lon) in degrees.

    State is [lat, lon, vlat, vlon]; q is a white-noise acceleration
    intensity so the process noise scales with the sampling gap.
    """

    H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])

    def __init__(self, q: float, r: float):
        if q < 0 or r < 0:
            raise ValueError("noise terms must be >= 0")
        self.q = q
        self.r = r
        self.x: Optional[np.ndarray] = None
        self.P = np.zeros((4, 4))

    def initialize(self, z: tuple[float, ...]) -> None:
        self.x = np.array([z[0], z[1], 0.0, 0.0], dtype=float)
        position_var = self.r if self.r > 0 else 1e-6
        velocity_var = (14.0 / METERS_PER_DEG_LAT) ** 2
        self.P = np.diag([position_var, position_var, velocity_var, velocity_var])

    def predict(self, dt: float) -> None:
        if self.x is None:
            raise PreprocessError("filter not initialized")
        dt = max(dt, 0.0)
        F = np.array(
            [
                [1.0, 0.0, dt, 0.0],
                [0.0, 1.0, 0.0, dt],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
        dt2, dt3 = dt * dt / 2.0, dt ** 3 / 3.0
        Q = self.q * np.array(
            [
                [dt3, 0.0, dt2, 0.0],
                [0.0, dt3, 0.0, dt2],
                [dt2, 0.0, dt, 0.0],
                [0.0, dt2, 0.0, dt],
            ]
        )
        self.x = F @ self.x
        self.P = F @ self.P @ F.T + Q

    def _measurement_cov(self, r: Union[None, float, np.ndarray]) -> np.ndarray:
        if r is None:
            r = self.r
        if np.isscalar(r):
            return np.eye(2) * float(r)
        return np.asarray(r, dtype=float)

    def innovation(
        self, z: tuple[float, ...], r: Union[None, float, np.ndarray] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        assert self.x is not None
        y = np.array(z, dtype=float) - self.H @ self.x
        S = self.H @ self.P @ self.H.T + self._measurement_cov(r)
        return y, S

    def mahalanobis(self, z: tuple[float, ...], r: Union[None, float, np.ndarray] = None) -> float:
        y, S = self.innovation(z, r)
        try:
            solved = np.linalg.solve(S, y)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(str(exc)) from exc
        return float(math.sqrt(max(0.0, float(y @ solved))))

    def update(self, z: tuple[float, ...], r: Union[None, float, np.ndarray] = None) -> None:
        assert self.x is not None
        y, S = self.innovation(z, r)
        try:
            K = self.P @ self.H.T @ np.linalg.inv(S)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(str(exc)) from exc
        self.x = self.x + K @ y
        # Joseph form: I_KH P I_KH' + K R K' stays symmetric PSD.
        identity_khn = np.eye(4) - K @ self.H
        R = self._measurement_cov(r)
        self.P = identity_khn @ self.P @ identity_khn.T + K @ R @ K.T

    def measurement(self) -> tuple[float, ...]:
        assert self.x is not None
        return (float(self.x[0]), float(self.x[1]))

    def covariance(self) -> np.ndarray:
        return self.P.copy()


KalmanFilter = Union[ScalarKalman, GpsKalman]


def make_filter(kind: str, config: PreprocessConfig) -> KalmanFilter:
    if kind == "gps":
        return GpsKalman(config.gps_q, config.gps_r)
    return ScalarKalman(config.scalar_q, config.scalar_r)


def kalman_smooth(samples: Sequence[Sample], filter_: KalmanFilter) -> list[Sample]:
    """Run the filter over a time-ordered series, emitting posterior positions."""
    smoothed: list[Sample] = []
    previous: Optional[datetime] = None
    for stamp, z in samples:
        if filter_.x is None:
            filter_.initialize(z)
        else:
            filter_.predict((stamp - previous).total_seconds())
            filter_.update(z)
        smoothed.append((stamp, filter_.measurement()))
        previous = stamp
    return smoothed


# -- multi-device fusion ---------------------------------------------------


@dataclass
class DeviceMeasurement:
    """One device's reading inside a frame, annotated during fusion."""

    z: tuple[float, ...]
    at: datetime
    distance: Optional[float] = None
    weight: Optional[float] = None


@dataclass
class FusionFrame:
    """Readings from different devices close enough in time to fuse."""

    at: datetime
    readings: dict[str, DeviceMeasurement] = field(default_factory=dict)


def group_frames(
    series_by_device: dict[str, Sequence[Sample]], window_sec: float
) -> list[FusionFrame]:
    """Window samples into fusion frames.

    Each frame is anchored at the earliest not-yet-assigned timestamp and
    absorbs every sample within window_sec of it; when a device reports twice
    inside one window its latest reading wins.
    """
    flat: list[tuple[datetime, str, tuple[float, ...]]] = [
        (stamp, device, z)
        for device, samples in sorted(series_by_device.items())
        for stamp, z in samples
    ]
    flat.sort(key=lambda row: (row[0], row[1]))
    frames: list[FusionFrame] = []
    index = 0
    while index < len(flat):
        anchor = flat[index][0]
        frame = FusionFrame(at=anchor)
        while index < len(flat) and (flat[index][0] - anchor).total_seconds() < window_sec:
            stamp, device, z = flat[index]
            current = frame.readings.get(device)
            if current is None or stamp >= current.at:
                frame.readings[device] = DeviceMeasurement(z=z, at=stamp)
            index += 1
        frames.append(frame)
    return frames


def update_reliability(score: float, distance: float, alpha: float, tau: float) -> float:
    """Bounded additive reliability update: reward consistent, punish deviant."""
    step = alpha if distance <= tau else -alpha
    return min(1.0, max(0.0, score + step))


WEIGHT_FLOOR = 1e-12

EQUAL = "equal"
MAHALANOBIS = "mahalanobis"


@dataclass
class FusionResult:
    """Fused series plus the per-device bookkeeping fusion produced."""

    samples: list[Sample]
    frames: list[FusionFrame]
    reliability: dict[str, float]


def fuse_frames(
    frames: Sequence[FusionFrame],
    filter_: KalmanFilter,
    kind: str,
    config: PreprocessConfig,
    reliability: Optional[dict[str, float]] = None,
    weighting: str = MAHALANOBIS,
) -> FusionResult:
    """Fuse framed multi-device readings through one Kalman filter.

    Per frame each device's reading gets a Mahalanobis distance D against the
    predicted measurement and a weight reliability/(1 + D^2) (or 1 under
    equal weighting).  The weighted mean forms the pseudo-measurement; its
    effective noise is the weight-combined inverse of the device noises,
    inflated by max(w)/sum(w) so that one dominant device cannot pretend the
    consensus is better than its own sensor.  Reliability scores move only in
    mahalanobis mode.
    """
    if weighting not in (EQUAL, MAHALANOBIS):
        raise ValueError(f"unknown weighting {weighting!r}")
    scores = dict(reliability or {})
    fused: list[Sample] = []
    previous: Optional[datetime] = None

    for frame in frames:
        devices = sorted(frame.readings)
        for device in devices:
            scores.setdefault(device, config.initial_reliability)

        if filter_.x is None:
            # Nothing to weigh against yet; seed with the plain frame mean.
            dims = len(frame.readings[devices[0]].z)
            mean = tuple(
                sum(frame.readings[d].z[i] for d in devices) / len(devices) for i in range(dims)
            )
            filter_.initialize(mean)
            for device in devices:
                frame.readings[device].weight = 1.0 / len(devices)
            fused.append((frame.at, filter_.measurement()))
            previous = frame.at
            continue

        filter_.predict((frame.at - previous).total_seconds())

        if len(devices) == 1:
            # Single-device frame: ordinary update against that device's noise.
            device = devices[0]
            reading = frame.readings[device]
            r_dev = config.r_for(device, kind)
            distance = filter_.mahalanobis(reading.z, r_dev)
            reading.distance = distance
            reading.weight = 1.0
            filter_.update(reading.z, r_dev)
            if weighting == MAHALANOBIS:
                scores[device] = update_reliability(scores[device], distance, config.alpha, config.tau)
        else:
            weights: dict[str, float] = {}
            for device in devices:
                reading = frame.readings[device]
                r_dev = config.r_for(device, kind)
                distance = filter_.mahalanobis(reading.z, r_dev)
                reading.distance = distance
                if weighting == MAHALANOBIS:
                    weights[device] = max(
                        WEIGHT_FLOOR, scores[device] / (1.0 + distance * distance)
                    )
                else:
                    weights[device] = 1.0
                reading.weight = weights[device]
            total = sum(weights.values())
            dims = len(frame.readings[devices[0]].z)
            z_star = tuple(
                sum(weights[d] * frame.readings[d].z[i] for d in devices) / total
                for i in range(dims)
            )
            if kind == "gps":
                information = np.zeros((2, 2))
                for device in devices:
                    r_dev = config.r_for(device, kind)
                    information += weights[device] * np.linalg.inv(np.eye(2) * r_dev)
                r_eff: Union[float, np.ndarray] = (
                    np.linalg.inv(information) * (max(weights.values()) / total)
                )
            else:
                information_scalar = sum(
                    weights[d] / config.r_for(d, kind) for d in devices
                )
                r_eff = (1.0 / information_scalar) * (max(weights.values()) / total)
            filter_.update(z_star, r_eff)
            if weighting == MAHALANOBIS:
                for device in devices:
                    scores[device] = update_reliability(
                        scores[device], frame.readings[device].distance, config.alpha, config.tau
                    )
        fused.append((frame.at, filter_.measurement()))
        previous = frame.at
    return FusionResult(samples=fused, frames=list(frames), reliability=scores)
