"""Rule evaluation: geodesy primitives, threshold accumulation, geofence,
backtrack, handover and shipment-duration checks.

Expected numbers were computed independently (spherical law of cosines for
the golden distance, hand-worked integrals for the accumulation series) and
are frozen here.
"""

import math
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veritrail.rules import (
    ALERT,
    EARTH_RADIUS_M,
    METERS_PER_DEG_LAT,
    OKAY,
    WARNING,
    BacktrackParams,
    ConsistencyParams,
    GeofenceParams,
    HandoverParams,
    InvalidPolygon,
    InvalidRuleParams,
    ThresholdParams,
    TimeoutParams,
    cumulative_severity,
    distance_to_ring_m,
    haversine_m,
    max_verdict,
    normalize_ring,
    point_in_polygon,
    point_to_polyline_m,
    rule_backtrack,
    rule_geofence,
    rule_handover,
    rule_shipment_timeout,
    rule_threshold,
)

FUNDAO = (40.137, -7.501)
PORTO = (41.149, -8.611)

T0 = datetime(2024, 7, 8, 10, 0, tzinfo=timezone.utc)


def series(values, gap_min=10.0, start=T0):
    return [(start + timedelta(minutes=i * gap_min), v) for i, v in enumerate(values)]


# -- geodesy ---------------------------------------------------------------


def test_golden_distance_fundao_to_porto():
    # law-of-cosines oracle: 146400.4070455272 m; haversine must agree to 0.1%
    assert haversine_m(FUNDAO, PORTO) == pytest.approx(146400.4070455272, rel=1e-3)


def test_haversine_degenerate_and_antipodal():
    assert haversine_m(FUNDAO, FUNDAO) == 0.0
    half_circumference = math.pi * EARTH_RADIUS_M
    assert haversine_m((0.0, 0.0), (0.0, 180.0)) == pytest.approx(
        half_circumference, rel=1e-12
    )
    assert half_circumference == pytest.approx(20015114.442035925, abs=1e-6)


def test_small_displacement_matches_meridian_scale():
    # 1000 m due north is 1000 / (pi * R / 180) degrees of latitude
    dlat = 1000.0 / METERS_PER_DEG_LAT
    assert dlat == pytest.approx(0.00899320363724538, abs=1e-15)
    assert haversine_m((40.0, -7.0), (40.0 + dlat, -7.0)) == pytest.approx(1000.0, rel=1e-9)


def test_haversine_is_symmetric():
    assert haversine_m(FUNDAO, PORTO) == pytest.approx(haversine_m(PORTO, FUNDAO), rel=1e-12)


def test_point_to_polyline_on_and_off_the_line():
    line = [(40.0, -7.0), (41.0, -7.0)]
    on_line = (40.5, -7.0)
    assert point_to_polyline_m(on_line, line) < 1.0
    offset = (40.5, -7.01)
    # nearest approach is the perpendicular foot at the same latitude
    expected = haversine_m(offset, (40.5, -7.0))
    assert point_to_polyline_m(offset, line) == pytest.approx(expected, rel=5e-3)
    # beyond the endpoint, the endpoint is the nearest feature
    past = (41.5, -7.0)
    assert point_to_polyline_m(past, line) == pytest.approx(
        haversine_m(past, (41.0, -7.0)), rel=5e-3
    )


SQUARE = [(0.0, 0.0), (0.0, 10.0), (10.0, 10.0), (10.0, 0.0)]


def test_point_in_polygon_interior_exterior_boundary():
    assert point_in_polygon((5.0, 5.0), SQUARE)
    assert not point_in_polygon((-1.0, 5.0), SQUARE)
    assert not point_in_polygon((5.0, 11.0), SQUARE)
    # boundary counts inside: edge midpoint and a vertex
    assert point_in_polygon((0.0, 5.0), SQUARE)
    assert point_in_polygon((10.0, 10.0), SQUARE)


def test_polygon_closed_ring_and_degenerate_rejection():
    closed = SQUARE + [SQUARE[0]]
    assert normalize_ring(closed) == [(lat, lon) for lat, lon in SQUARE]
    with pytest.raises(InvalidPolygon):
        normalize_ring([(0, 0), (1, 1)])
    with pytest.raises(InvalidPolygon):
        normalize_ring([(0, 0), (1, 1), (2, 2)])  # collinear, zero area


def test_distance_to_ring_zero_on_boundary():
    assert distance_to_ring_m((0.0, 5.0), SQUARE) < 1.0
    assert distance_to_ring_m((-0.1, 5.0), SQUARE) > 0.0


# -- threshold -------------------------------------------------------------

COLD_CHAIN = [3.2, 4.5, 5.0, 3.8, 3.5, 2.9, 3.1, 6.0, 3.0]


def test_trapezoid_accumulation_contributions_and_crossing():
    total, contributions, crossing = cumulative_severity(
        series(COLD_CHAIN), t_max=4.0, mode="trapezoid", limit=30.0
    )
    assert contributions == pytest.approx([2.5, 7.5, 5.0, 0.0, 0.0, 0.0, 10.0, 10.0], abs=1e-12)
    assert total == pytest.approx(35.0, abs=1e-9)
    # the running integral only passes 30 on the final segment
    assert crossing == 8


def test_rectangle_accumulation_running_sums_and_crossing():
    total, contributions, crossing = cumulative_severity(
        series(COLD_CHAIN), t_max=4.0, mode="rectangle", limit=30.0
    )
    running = []
    acc = 0.0
    for c in contributions:
        acc += c
        running.append(acc)
    assert running == pytest.approx([0, 5, 15, 15, 15, 15, 15, 35, 35], abs=1e-12)
    assert total == pytest.approx(35.0, abs=1e-12)
    # rectangle charging fires on the 6.0 degree sample itself
    assert crossing == 7


def test_rectangle_first_sample_gap_fallback():
    # a series that starts already out of band needs a gap for sample 0
    values = series([6.0, 3.0], gap_min=10.0)
    total_default, _, _ = cumulative_severity(values, t_max=4.0, mode="rectangle")
    assert total_default == pytest.approx(20.0)  # falls back to the observed 10 min
    total_nominal, _, _ = cumulative_severity(
        values, t_max=4.0, mode="rectangle", nominal_gap_min=5.0
    )
    assert total_nominal == pytest.approx(10.0)


def test_rule_threshold_strict_band_without_limit():
    result = rule_threshold(series(COLD_CHAIN), ThresholdParams(t_max=4.0))
    assert result.verdict == ALERT
    assert result.metrics["sampleCount"] == 9.0
    assert result.metrics["flaggedCount"] == 3.0
    assert [v.magnitude for v in result.violations] == pytest.approx([0.5, 1.0, 2.0])
    assert "above max bound 4" in result.violations[0].detail


def test_rule_threshold_cumulative_verdict_follows_crossing_only():
    params = ThresholdParams(t_max=4.0, cumulative_limit=30.0, sampling_mode="rectangle")
    result = rule_threshold(series(COLD_CHAIN), params)
    assert result.verdict == ALERT
    assert result.metrics["cumulativeSeverity"] == pytest.approx(35.0)
    assert result.metrics["crossingIndex"] == 7.0
    crossing = result.violations[-1]
    assert "cumulative severity 35 exceeds limit 30 (rectangle accumulation)" in crossing.detail
    assert crossing.ref == "2024-07-08T11:10:00Z"

    # under the limit the same excursions stay informational
    lenient = ThresholdParams(t_max=4.0, cumulative_limit=50.0, sampling_mode="rectangle")
    result = rule_threshold(series(COLD_CHAIN), lenient)
    assert result.verdict == OKAY
    assert result.metrics["flaggedCount"] == 3.0
    assert result.notes == ["out-of-band samples present but cumulative limit not exceeded"]


def test_rule_threshold_modes_disagree_on_crossing_sample():
    rect = rule_threshold(
        series(COLD_CHAIN),
        ThresholdParams(t_max=4.0, cumulative_limit=30.0, sampling_mode="rectangle"),
    )
    trap = rule_threshold(
        series(COLD_CHAIN),
        ThresholdParams(t_max=4.0, cumulative_limit=30.0, sampling_mode="trapezoid"),
    )
    assert rect.metrics["crossingIndex"] == 7.0
    assert trap.metrics["crossingIndex"] == 8.0
    assert rect.metrics["cumulativeSeverity"] == pytest.approx(
        trap.metrics["cumulativeSeverity"], abs=1e-9
    )


def test_rule_threshold_band_below_min_and_empty_series():
    result = rule_threshold(series([2.0, 5.0]), ThresholdParams(t_max=8.0, t_min=3.0))
    assert result.verdict == ALERT
    assert "below min bound 3" in result.violations[0].detail
    empty = rule_threshold([], ThresholdParams(t_max=4.0))
    assert empty.verdict == OKAY
    assert empty.notes


def test_threshold_params_validation():
    with pytest.raises(InvalidRuleParams):
        ThresholdParams.from_dict({"kind": "temperature"})
    with pytest.raises(InvalidRuleParams):
        ThresholdParams.from_dict({"tMax": 1.0, "tMin": 2.0})
    with pytest.raises(InvalidRuleParams):
        ThresholdParams.from_dict({"tMax": 4.0, "samplingMode": "simpson"})
    params = ThresholdParams.from_dict({"tMax": 4.0, "cumulativeLimit": 30, "unit": "C"})
    assert params.cumulative_limit == 30.0 and params.unit == "C"


# -- geofence ---------------------------------------------------------------


def corridor():
    return GeofenceParams(
        polygon=[(39.9, -7.1), (39.9, -6.9), (40.6, -6.9), (40.6, -7.1)],
        start_center=(40.0, -7.0),
        start_radius_m=5000.0,
        end_center=(40.5, -7.0),
        end_radius_m=5000.0,
    )


def track(positions, start=T0, gap_min=10.0):
    return [
        (start + timedelta(minutes=i * gap_min), pos) for i, pos in enumerate(positions)
    ]


def test_geofence_clean_track_passes_polygon_and_radii():
    result = rule_geofence(track([(40.0, -7.0), (40.2, -7.0), (40.5, -7.0)]), corridor())
    assert result.verdict == OKAY
    assert result.metrics == {"sampleCount": 3.0, "outsideCount": 0.0, "maxOutsideM": 0.0}


def test_geofence_flags_out_of_ring_samples_with_distance():
    result = rule_geofence(
        track([(40.0, -7.0), (40.2, -6.7), (40.5, -7.0)]), corridor()
    )
    assert result.verdict == ALERT
    assert result.metrics["outsideCount"] == 1.0
    [violation] = result.violations
    assert "position outside corridor by" in violation.detail
    # 0.2 degrees of longitude at 40.2N, ~17 km
    assert violation.magnitude == pytest.approx(
        0.2 * METERS_PER_DEG_LAT * math.cos(math.radians(40.2)), rel=0.05
    )
    assert result.metrics["maxOutsideM"] == violation.magnitude


def test_geofence_start_radius_violation():
    result = rule_geofence(
        track([(40.1, -7.0), (40.2, -7.0), (40.5, -7.0)]), corridor()
    )
    assert result.verdict == ALERT
    [violation] = result.violations
    assert "from start point, allowed 5000 m" in violation.detail
    assert violation.magnitude > 0


def test_geofence_end_radius_violation():
    result = rule_geofence(
        track([(40.0, -7.0), (40.2, -7.0), (40.4, -7.0)]), corridor()
    )
    assert result.verdict == ALERT
    assert "from end point" in result.violations[0].detail


def test_geofence_params_validation():
    with pytest.raises(InvalidRuleParams):
        GeofenceParams.from_dict({})
    with pytest.raises(InvalidRuleParams):
        GeofenceParams.from_dict({"polygon": SQUARE, "startCenter": [0, 0]})
    params = GeofenceParams.from_dict(
        {"polygon": SQUARE, "startCenter": [0, 0], "startRadiusM": 100}
    )
    assert params.start_radius_m == 100.0


# -- backtrack ---------------------------------------------------------------

DEST = (41.0, -7.0)


def approach(n, start_lat=40.0, step=0.1):
    return [(start_lat + i * step, -7.0) for i in range(n)]


def test_backtrack_monotone_approach_is_clean():
    params = BacktrackParams(destination=DEST, epsilon_m=500.0)
    result = rule_backtrack(track(approach(8)), params)
    assert result.verdict == OKAY
    assert result.metrics["runCount"] == 0.0
    assert result.metrics["maxRecessionM"] == 0.0


def test_backtrack_flags_one_sustained_detour_run():
    # approach, then three consecutive samples receding well past epsilon,
    # then resume the approach
    positions = approach(4) + [(40.2, -7.0), (40.1, -7.0), (40.0, -7.0)] + [(40.5, -7.0)]
    params = BacktrackParams(destination=DEST, epsilon_m=500.0, min_consecutive=3)
    result = rule_backtrack(track(positions), params)
    assert result.verdict == ALERT
    assert result.metrics["runCount"] == 1.0
    [violation] = result.violations
    assert "3 consecutive samples" in violation.detail
    assert ".." in violation.ref
    # best approach was 0.7 deg from the destination; the run ends 1.0 deg
    # away, so the recession peaks at 0.3 deg
    assert violation.magnitude == pytest.approx(0.3 * METERS_PER_DEG_LAT, rel=0.01)


def test_backtrack_short_blips_are_tolerated():
    # two receding samples < min_consecutive of 3
    positions = approach(4) + [(40.2, -7.0), (40.2, -7.0)] + [(40.5, -7.0)]
    params = BacktrackParams(destination=DEST, epsilon_m=500.0, min_consecutive=3)
    result = rule_backtrack(track(positions), params)
    assert result.verdict == OKAY
    assert result.metrics["runCount"] == 0.0


def test_backtrack_jitter_within_epsilon_is_clean():
    # GPS noise around a fixed position never exceeds epsilon
    positions = [(40.0, -7.0), (39.999, -7.0), (40.001, -7.0), (39.9995, -7.0)]
    params = BacktrackParams(destination=DEST, epsilon_m=500.0)
    assert rule_backtrack(track(positions), params).verdict == OKAY


def test_backtrack_params_validation():
    with pytest.raises(InvalidRuleParams):
        BacktrackParams.from_dict({"destination": [41.0, -7.0], "epsilonM": 0})
    with pytest.raises(InvalidRuleParams):
        BacktrackParams.from_dict(
            {"destination": [41.0, -7.0], "epsilonM": 10, "minConsecutive": 0}
        )
    params = BacktrackParams.from_dict({"destination": [41.0, -7.0], "epsilonM": 10})
    assert params.min_consecutive == 3


# -- handover ----------------------------------------------------------------


def test_handover_within_window_is_okay():
    depart = datetime(2024, 7, 8, 10, 0, tzinfo=timezone.utc)
    arrive = datetime(2024, 7, 8, 10, 30, tzinfo=timezone.utc)
    result = rule_handover(depart, arrive, HandoverParams(max_gap_min=120.0))
    assert result.verdict == OKAY
    assert result.metrics["gapMin"] == pytest.approx(30.0)


def test_handover_gap_above_max_flags():
    depart = T0
    arrive = T0 + timedelta(hours=3)
    result = rule_handover(depart, arrive, HandoverParams(max_gap_min=120.0))
    assert result.verdict == ALERT
    assert "custody gap 180.0 min exceeds allowed 120 min" in result.violations[0].detail


def test_handover_missing_counterpart_is_warning():
    result = rule_handover(T0, None, HandoverParams(max_gap_min=120.0))
    assert result.verdict == WARNING
    assert "missing arrival counterpart event" in result.violations[0].detail
    result = rule_handover(None, T0, HandoverParams(max_gap_min=120.0))
    assert "missing departure counterpart event" in result.violations[0].detail


def test_handover_negative_gap_is_alert_even_at_warning_severity():
    result = rule_handover(
        T0, T0 - timedelta(minutes=30), HandoverParams(max_gap_min=120.0), severity=WARNING
    )
    assert result.verdict == ALERT
    assert "arrival precedes departure by 30.0 min" in result.violations[0].detail


def test_handover_params_validation():
    with pytest.raises(InvalidRuleParams):
        HandoverParams.from_dict({"maxGapMin": 10, "minGapMin": 10})
    with pytest.raises(InvalidRuleParams):
        HandoverParams.from_dict({})


# -- shipment timeout ---------------------------------------------------------


def test_duration_within_bounds_is_okay():
    start = T0
    end = T0 + timedelta(minutes=16)
    result = rule_shipment_timeout(start, end, TimeoutParams(5.0, 60.0))
    assert result.verdict == OKAY
    assert result.metrics["durationMin"] == pytest.approx(16.0)


def test_implausibly_short_duration_is_flagged():
    start = T0
    end = T0 + timedelta(minutes=105)
    result = rule_shipment_timeout(start, end, TimeoutParams(150.0, 600.0))
    assert result.verdict == ALERT
    assert (
        "implausibly short: 105.0 min against a minimum of 150 min"
        in result.violations[0].detail
    )


def test_delayed_duration_is_flagged():
    result = rule_shipment_timeout(
        T0, T0 + timedelta(minutes=90), TimeoutParams(5.0, 60.0)
    )
    assert result.verdict == ALERT
    assert "delayed: 90.0 min against a maximum of 60 min" in result.violations[0].detail


def test_duration_bounds_are_inclusive():
    at_max = rule_shipment_timeout(T0, T0 + timedelta(minutes=60), TimeoutParams(5.0, 60.0))
    assert at_max.verdict == OKAY
    at_min = rule_shipment_timeout(T0, T0 + timedelta(minutes=5), TimeoutParams(5.0, 60.0))
    assert at_min.verdict == OKAY


def test_open_step_is_warning_not_alert():
    result = rule_shipment_timeout(T0, None, TimeoutParams(5.0, 60.0))
    assert result.verdict == WARNING
    assert "still open" in result.violations[0].detail
    result = rule_shipment_timeout(None, None, TimeoutParams(5.0, 60.0))
    assert result.verdict == WARNING


def test_timeout_params_validation():
    with pytest.raises(InvalidRuleParams):
        TimeoutParams.from_dict({"minDurationMin": 60, "maxDurationMin": 60})


def test_consistency_params_validation():
    params = ConsistencyParams.from_dict(
        {"numericTolerance": 0.005, "attributeTolerances": {"weightKg": 0.1}}
    )
    assert params.numeric_tolerance == 0.005
    assert params.attribute_tolerances == {"weightKg": 0.1}
    with pytest.raises(InvalidRuleParams):
        ConsistencyParams.from_dict({"numericTolerance": -1})


# -- verdict lattice -----------------------------------------------------------


def test_max_verdict_lattice():
    assert max_verdict([]) == OKAY
    assert max_verdict([OKAY, WARNING]) == WARNING
    assert max_verdict([WARNING, ALERT, OKAY]) == ALERT
    with pytest.raises(ValueError):
        max_verdict(["catastrophe"])


# -- properties -----------------------------------------------------------------

verdict_lists = st.lists(st.sampled_from([OKAY, WARNING, ALERT]), max_size=6)


@settings(max_examples=100, deadline=None)
@given(verdict_lists, verdict_lists)
def test_max_verdict_is_a_monoid_homomorphism(a, b):
    # max of the concatenation equals max of the two maxima
    assert max_verdict(a + b) == max_verdict([max_verdict(a), max_verdict(b)])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(min_value=-10, max_value=20), min_size=3, max_size=20),
    st.integers(min_value=1, max_value=18),
)
def test_trapezoid_severity_is_additive_at_any_split(values, k):
    k = min(k, len(values) - 1)
    samples = series(values)
    whole, _, _ = cumulative_severity(samples, t_max=4.0, mode="trapezoid")
    left, _, _ = cumulative_severity(samples[: k + 1], t_max=4.0, mode="trapezoid")
    right, _, _ = cumulative_severity(samples[k:], t_max=4.0, mode="trapezoid")
    assert left + right == pytest.approx(whole, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=-10, max_value=20), min_size=1, max_size=15))
def test_modes_agree_when_series_starts_and_ends_in_band(interior):
    # uniform cadence with in-band endpoints: the piecewise-linear integral
    # and the per-sample charging sum to the same total
    values = [0.0] + interior + [0.0]
    samples = series(values)
    trap, _, _ = cumulative_severity(samples, t_max=4.0, mode="trapezoid")
    rect, _, _ = cumulative_severity(samples, t_max=4.0, mode="rectangle")
    assert rect == pytest.approx(trap, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(min_value=39.0, max_value=41.0),
            st.floats(min_value=-8.0, max_value=-6.0),
        ),
        min_size=1,
        max_size=12,
    ),
    st.floats(min_value=0.3, max_value=0.95),
)
def test_shrinking_the_fence_never_clears_a_violating_track(positions, scale):
    ring = [(39.5, -7.5), (39.5, -6.5), (40.5, -6.5), (40.5, -7.5)]
    center_lat, center_lon = 40.0, -7.0
    shrunk = [
        (center_lat + (lat - center_lat) * scale, center_lon + (lon - center_lon) * scale)
        for lat, lon in ring
    ]
    big = rule_geofence(track(positions), GeofenceParams(polygon=ring))
    small = rule_geofence(track(positions), GeofenceParams(polygon=shrunk))
    if big.verdict != OKAY:
        assert small.verdict != OKAY
    assert small.metrics["outsideCount"] >= big.metrics["outsideCount"]


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=2, max_value=10),
    st.integers(min_value=1, max_value=8),
)
def test_appending_approaching_samples_keeps_backtrack_clean(n, extra):
    params = BacktrackParams(destination=DEST, epsilon_m=200.0)
    base = approach(n, start_lat=39.0, step=0.05)
    assert rule_backtrack(track(base), params).verdict == OKAY
    closer = approach(extra, start_lat=39.0 + n * 0.05, step=0.05)
    assert rule_backtrack(track(base + closer), params).verdict == OKAY


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-5, max_value=15), min_size=1, max_size=12))
def test_rule_threshold_is_pure(values):
    params = ThresholdParams(t_max=4.0, cumulative_limit=30.0)
    first = rule_threshold(series(values), params)
    second = rule_threshold(series(values), params)
    assert first.to_dict() == second.to_dict()
