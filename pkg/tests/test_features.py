"""Tests for per-stay feature extraction."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bustop.acoustics import mfcc
from bustop.features import (
    FEATURE_NAMES,
    FeatureParams,
    FeatureRecord,
    FeatureVector,
    MissingFeature,
    NoAudioInWindow,
    NoMotionBeforeStay,
    approach_window,
    build_feature_vector,
    featurize_trip,
    read_features,
    rsi,
    top5_mfcc,
    wifi_count_at_stay,
    wifi_count_on_edge,
    write_features,
)
from bustop.geometry import meters_to_degrees_lat
from bustop.mapenc import TileStore
from bustop.models import AudioStream, BustopError, Direction, GeoPoint, StayType, TripTrace, WifiScan
from bustop.staypoint import ClusterParams, find_stays
from bustop.synth import LEGEND

T0 = 1_709_526_600_000
IMU_HZ = 100


def approach_trace(a: float, v: float, moving: int = 10, audio: np.ndarray | None = None, wifi=()) -> TripTrace:
    """`moving` fixes at constant speed v (v meters apart), then a 3 s stay.

    The vertical accelerometer alternates 9.81 ± a, so the gravity-removed residual is ±a.
    """
    gps = [GeoPoint(23.52 + meters_to_degrees_lat(k * v), 87.31, T0 + k * 1000, v) for k in range(moving)]
    stop = 23.52 + meters_to_degrees_lat(moving * v)
    gps += [GeoPoint(stop, 87.31, T0 + (moving + k) * 1000, 0.0) for k in range(3)]
    n = (moving + 3) * IMU_HZ
    imu = np.zeros((n, 4))
    imu[:, 0] = T0 + np.arange(n) * (1000 // IMU_HZ)
    imu[:, 3] = 9.81 + a * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    samples = audio if audio is not None else np.zeros((moving + 3) * 8000, dtype=np.int16)
    return TripTrace("t", Direction.UP, tuple(gps), imu, AudioStream(samples, T0), tuple(wifi))


def only_stay(trace: TripTrace):
    (stay,) = find_stays(trace, ClusterParams())
    return stay


class TestRsi:
    def test_constant_residual_and_speed(self):
        trace = approach_trace(a=1.5, v=12.0)
        assert rsi(trace, only_stay(trace)) == pytest.approx(1.5 / 12.0, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(
        a=st.floats(min_value=0.1, max_value=5.0),
        v=st.floats(min_value=3.5, max_value=30.0),
        c=st.floats(min_value=0.1, max_value=10.0),
    )
    def test_scale_laws(self, a, v, c):
        base = approach_trace(a, v)
        stay = only_stay(base)
        value = rsi(base, stay)
        assert value == pytest.approx(a / v, rel=1e-9)

        faster_gps = tuple(p._replace(speed=p.speed * c) for p in base.gps)
        faster = TripTrace("t", Direction.UP, faster_gps, base.imu, base.audio)
        assert rsi(faster, stay) == pytest.approx(value / c, rel=1e-9)

        rougher = approach_trace(a * c, v)
        assert rsi(rougher, only_stay(rougher)) == pytest.approx(value * c, rel=1e-9)

    def test_window_covers_fifty_meters(self):
        trace = approach_trace(a=1.0, v=12.0)
        stay = only_stay(trace)
        t_w, t_end = approach_window(trace, stay)
        assert t_end == stay.t_start
        assert (t_end - t_w) // 1000 == 5

    def test_short_trip_uses_trip_start(self):
        trace = approach_trace(a=1.0, v=4.0, moving=3)
        assert approach_window(trace, only_stay(trace))[0] == T0

    def test_no_motion_before_stay(self):
        trace = approach_trace(a=1.0, v=10.0, moving=0)
        with pytest.raises(NoMotionBeforeStay):
            rsi(trace, only_stay(trace))


class TestWifi:
    def test_distinct_union_at_stay(self):
        trace = approach_trace(1.0, 10.0)
        stay = only_stay(trace)
        scans = (
            WifiScan(stay.t_start, frozenset({"a", "b", "c"})),
            WifiScan(stay.t_start + 1000, frozenset({"b", "c", "d"})),
            WifiScan(stay.t_end, frozenset({"a", "e"})),
        )
        trace = approach_trace(1.0, 10.0, wifi=scans)
        assert wifi_count_at_stay(trace, stay) == 5

    def test_stay_window_is_closed(self):
        trace = approach_trace(1.0, 10.0)
        stay = only_stay(trace)
        scans = (WifiScan(stay.t_start - 1, frozenset({"x"})), WifiScan(stay.t_end + 1, frozenset({"y"})))
        assert wifi_count_at_stay(approach_trace(1.0, 10.0, wifi=scans), stay) == 0

    def test_first_stay_counts_from_trip_start(self):
        stay = only_stay(approach_trace(1.0, 10.0))
        scans = (WifiScan(T0, frozenset({"a"})), WifiScan(T0 + 3000, frozenset({"b"})))
        assert wifi_count_on_edge(approach_trace(1.0, 10.0, wifi=scans), None, stay) == 2

    def test_edge_window_is_open(self):
        trace = approach_trace(1.0, 10.0)
        stay = only_stay(trace)
        prev = replace(stay, stay_id="t-prev", t_start=T0, t_end=T0 + 2000)
        scans = (
            WifiScan(T0 + 2000, frozenset({"at-prev-end"})),
            WifiScan(T0 + 5000, frozenset({"a", "b"})),
            WifiScan(stay.t_start, frozenset({"at-start"})),
        )
        assert wifi_count_on_edge(approach_trace(1.0, 10.0, wifi=scans), prev, stay) == 2


class TestTop5:
    def test_matches_mean_sort_take_five(self):
        rng = np.random.default_rng(5)
        audio = rng.integers(-5000, 5000, 13 * 8000).astype(np.int16)
        trace = approach_trace(1.0, 10.0, audio=audio)
        stay = only_stay(trace)
        window = trace.audio.window(stay.t_start, stay.t_end)
        means = mfcc(window).mean(axis=0)
        expected = sorted(means.tolist(), reverse=True)[:5]
        assert list(top5_mfcc(trace, stay)) == pytest.approx(expected, abs=1e-12)
        assert list(top5_mfcc(trace, stay)) == sorted(top5_mfcc(trace, stay), reverse=True)

    def test_no_audio(self):
        trace = approach_trace(1.0, 10.0, audio=np.zeros(0, dtype=np.int16))
        with pytest.raises(NoAudioInWindow):
            top5_mfcc(trace, only_stay(trace))


class TestFeatureVector:
    def test_array_round_trip_keeps_integer_fields(self):
        fv = FeatureVector(20.0, 1, 2, 3, 4, 5, 7, 3, 0.1, 50.0, 10.0, 30.0, 1)
        back = FeatureVector.from_array(fv.as_array())
        assert back == fv
        assert isinstance(back.f7, int) and isinstance(back.f13, int)

    def test_full_vector_on_synthetic_trip(self, small_trip, small_route):
        trace, manifest = small_trip
        stays = find_stays(trace, ClusterParams())
        assert len(stays) == len(manifest)
        fv = build_feature_vector(trace, None, stays[0], small_route.tile_store())
        assert len(fv) == 13
        assert all(math.isfinite(v) for v in fv)
        assert fv.f1 == manifest[0].duration_s
        assert fv.f13 in (0, 1)
        assert fv.f10 + fv.f11 + fv.f12 <= 100.0 + 1e-9

    def test_missing_tiles_name_spatial_features(self, small_trip, tmp_path):
        trace, _ = small_trip
        stay = find_stays(trace, ClusterParams())[0]
        with pytest.raises(MissingFeature) as e:
            build_feature_vector(trace, None, stay, TileStore(tmp_path, LEGEND))
        assert e.value.features == "f10..f13"


class TestFeaturizeTrip:
    def test_records_in_stay_order_with_truth(self, small_trip, small_route):
        trace, manifest = small_trip
        stays = find_stays(trace, ClusterParams())
        labeled = [s.with_truth(m.types) for s, m in zip(stays, manifest)]
        records, missing = featurize_trip(trace, labeled, small_route.tile_store())
        assert missing == []
        assert [r.stay_id for r in records] == [s.stay_id for s in stays]
        assert [r.labels for r in records] == [m.types for m in manifest]

    def test_threads_match_sequential(self, small_trip, small_route):
        trace, _ = small_trip
        stays = find_stays(trace, ClusterParams())
        one, _ = featurize_trip(trace, stays, small_route.tile_store(), FeatureParams(), n_jobs=1)
        many, _ = featurize_trip(trace, stays, small_route.tile_store(), FeatureParams(), n_jobs=3)
        assert one == many

    def test_failed_stays_are_reported_not_raised(self, small_trip, tmp_path):
        trace, _ = small_trip
        stays = find_stays(trace, ClusterParams())
        records, missing = featurize_trip(trace, stays, TileStore(tmp_path, LEGEND))
        assert records == []
        assert [m.stay_id for m in missing] == [s.stay_id for s in stays]


def test_features_csv_round_trip(tmp_path):
    records = [
        FeatureRecord("s-000", FeatureVector(20.0, 1.5, 1.25, -0.5, -1.0, -2.0, 7, 3, 0.1, 50.0, 10.0, 30.0, 1),
                      frozenset({StayType.BUS_STOP, StayType.SIGNAL})),  # fmt: skip
        FeatureRecord("s-001", FeatureVector(6.0, 0.1 + 0.2, 0, 0, 0, 0, 0, 0, 1 / 3, 0, 0, 0, 0), frozenset()),
    ]
    write_features(tmp_path / "features.csv", records)
    header = (tmp_path / "features.csv").read_text().splitlines()[0]
    assert header == ",".join(["stay_id", *FEATURE_NAMES, "labels"])
    assert read_features(tmp_path / "features.csv") == records


def test_read_features_errors(tmp_path):
    with pytest.raises(BustopError, match="cannot load features"):
        read_features(tmp_path / "absent.csv")
    header = ",".join(["stay_id", *FEATURE_NAMES, "labels"])
    (tmp_path / "bad.csv").write_text(header + "\ns-0," + ",".join(["1"] * 13) + ",Pothole\n")
    with pytest.raises(BustopError):
        read_features(tmp_path / "bad.csv")
