"""Tests for trip ingestion, serialization, validation and IMU reorientation."""

import json

import numpy as np
import pytest

from bustop.models import AudioStream, Direction, GeoPoint, GroundTruthMark, ImuSample, StayType, TripTrace, WifiScan
from bustop.trace import (
    DegenerateGravity,
    InsufficientSamples,
    MalformedRecord,
    MissingFile,
    NonMonotonicTimestamp,
    WrongSampleRate,
    parse_trip,
    reorient_imu,
    validate_trace,
    write_trip,
)

T0 = 1_709_526_600_000


def make_trace(**overrides) -> TripTrace:
    gps = tuple(GeoPoint(23.52 + i * 1e-4, 87.31, T0 + i * 1000, 5.0 if i != 1 else 0.0) for i in range(3))
    imu = np.zeros((200, 4))
    imu[:, 0] = T0 + np.arange(200) * 10
    imu[:, 3] = 9.81
    fields = dict(
        trip_id="t1",
        direction=Direction.UP,
        gps=gps,
        imu=imu,
        audio=AudioStream(np.arange(-8000, 8000, dtype=np.int16), T0),
        wifi=(WifiScan(T0, frozenset({"aa:bb"})), WifiScan(T0 + 1000, frozenset({"aa:bb", "cc:dd"}))),
        marks=(GroundTruthMark(T0 + 1000, frozenset({StayType.BUS_STOP})),),
    )
    fields.update(overrides)
    return TripTrace(**fields)


@pytest.fixture
def trip_dir(tmp_path):
    return write_trip(make_trace(), tmp_path / "t1")


class TestParseTrip:
    def test_three_gps_rows(self, trip_dir):
        trace = parse_trip(trip_dir)
        assert len(trace.gps) == 3
        assert trace.trip_id == "t1"
        assert trace.direction is Direction.UP

    def test_round_trip_identity(self, trip_dir, tmp_path):
        first = parse_trip(trip_dir)
        second = parse_trip(write_trip(first, tmp_path / "again"))
        assert first == second
        assert first == make_trace()

    def test_gyroscope_columns_ignored(self, trip_dir):
        assert parse_trip(trip_dir).imu.shape == (200, 4)

    def test_wifi_rows_grouped_into_scans(self, trip_dir):
        wifi = parse_trip(trip_dir).wifi
        assert [len(s.bssids) for s in wifi] == [1, 2]

    def test_missing_file(self, trip_dir):
        (trip_dir / "labels.csv").unlink()
        with pytest.raises(MissingFile):
            parse_trip(trip_dir)

    def test_latitude_out_of_range(self, trip_dir):
        (trip_dir / "gps.csv").write_text(f"t_ms,lat,lon,speed_mps\n{T0},91.0,87.31,0.0\n")
        with pytest.raises(MalformedRecord) as e:
            parse_trip(trip_dir)
        assert str(e.value).startswith("gps.csv:2:")
        assert e.value.line == 2

    def test_bad_header(self, trip_dir):
        (trip_dir / "gps.csv").write_text(f"t,lat,lon,speed\n{T0},23.0,87.31,0.0\n")
        with pytest.raises(MalformedRecord):
            parse_trip(trip_dir)

    def test_non_numeric_field_reports_line(self, trip_dir):
        (trip_dir / "gps.csv").write_text(f"t_ms,lat,lon,speed_mps\n{T0},23.0,87.31,0.0\n{T0 + 1000},x,87.31,0.0\n")
        with pytest.raises(MalformedRecord, match=":3:"):
            parse_trip(trip_dir)

    def test_non_monotonic_gps(self, trip_dir):
        (trip_dir / "gps.csv").write_text(f"t_ms,lat,lon,speed_mps\n{T0},23.0,87.31,0.0\n{T0},23.0,87.31,0.0\n")
        with pytest.raises(NonMonotonicTimestamp):
            parse_trip(trip_dir)

    def test_wrong_sample_rate(self, trip_dir):
        (trip_dir / "audio.json").write_text(json.dumps({"sample_rate": 44100, "t0_ms": T0}))
        with pytest.raises(WrongSampleRate):
            parse_trip(trip_dir)

    def test_unknown_stay_type(self, trip_dir):
        (trip_dir / "labels.csv").write_text(f"t_ms,types\n{T0},BusStop|Pothole\n")
        with pytest.raises(MalformedRecord):
            parse_trip(trip_dir)

    def test_meta_is_optional(self, trip_dir):
        (trip_dir / "meta.json").unlink()
        trace = parse_trip(trip_dir, utc_offset_min=0)
        assert trace.trip_id == "t1"
        assert trace.utc_offset_min == 0

    def test_ad_hoc_combined_with_bus_stop(self, trip_dir):
        (trip_dir / "labels.csv").write_text(f"t_ms,types\n{T0},BusStop\n{T0 + 1000},AdHoc|BusStop\n")
        with pytest.raises(MalformedRecord) as e:
            parse_trip(trip_dir)
        assert e.value.line == 3

    def test_wifi_scan_two_hours_late(self, trip_dir):
        late = T0 + 2000 + 2 * 3600 * 1000
        (trip_dir / "wifi.csv").write_text(f"t_ms,bssid\n{T0},aa:bb\n{late},aa:bb\n")
        with pytest.raises(MalformedRecord, match="wifi.csv:3:.*outside the GPS span"):
            parse_trip(trip_dir)

    def test_audio_starting_after_the_trip(self, trip_dir):
        (trip_dir / "audio.json").write_text(json.dumps({"sample_rate": 8000, "t0_ms": T0 + 3600 * 1000}))
        with pytest.raises(MalformedRecord, match="audio.json"):
            parse_trip(trip_dir)

    @pytest.mark.parametrize("meta", ['{"direction": "Sideways"}', "{not json", '{"utc_offset_min": "east"}', "[]"])
    def test_bad_meta(self, trip_dir, meta):
        (trip_dir / "meta.json").write_text(meta)
        with pytest.raises(MalformedRecord, match="meta.json"):
            parse_trip(trip_dir)

    def test_imu_fractional_timestamp(self, trip_dir):
        (trip_dir / "imu.csv").write_text(f"t_ms,ax,ay,az,gx,gy,gz\n{T0},0,0,9.81,0,0,0\n{T0}.5,0,0,9.81,0,0,0\n")
        with pytest.raises(MalformedRecord) as e:
            parse_trip(trip_dir)
        assert e.value.line == 3

    def test_imu_rows_missing_gyroscope(self, trip_dir):
        (trip_dir / "imu.csv").write_text(f"t_ms,ax,ay,az,gx,gy,gz\n{T0},0,0,9.81\n{T0 + 10},0,0,9.81\n")
        with pytest.raises(MalformedRecord, match="expected 7 fields"):
            parse_trip(trip_dir)


class TestReorient:
    def test_aligned_input_unchanged(self):
        imu = make_trace().imu
        assert np.allclose(reorient_imu(imu), imu, atol=1e-9)

    def test_gravity_on_x_moves_to_z(self):
        samples = [ImuSample(T0 + i, 9.81, 0.0, 0.0) for i in range(150)]
        out = reorient_imu(samples)
        assert np.allclose(out[:, 1:].mean(axis=0), [0.0, 0.0, 9.81], atol=1e-9)
        assert np.allclose(np.linalg.norm(out[:, 1:], axis=1), 9.81, atol=1e-9)

    def test_gravity_pointing_down_flips(self):
        imu = make_trace().imu.copy()
        imu[:, 3] = -9.81
        assert np.allclose(reorient_imu(imu)[:, 3], 9.81, atol=1e-9)

    def test_random_rotation_matches_oracle(self):
        rng = np.random.default_rng(3)
        up = rng.normal(size=3)
        up /= np.linalg.norm(up)
        n = 500
        vertical = 9.81 + rng.normal(0, 0.5, size=n)
        imu = np.column_stack([np.arange(n), vertical[:, None] * up[None, :] + rng.normal(0, 0.01, size=(n, 3))])
        out = reorient_imu(imu)

        # oracle: rotation about axis up×z by the angle between them
        g = imu[:, 1:].mean(axis=0)
        g /= np.linalg.norm(g)
        axis = np.cross(g, [0, 0, 1])
        angle = np.arctan2(np.linalg.norm(axis), g[2])
        axis /= np.linalg.norm(axis)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rotation = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k
        expected = imu[:, 1:] @ rotation.T
        assert np.sqrt(np.mean(out[:, 3] ** 2)) == pytest.approx(np.sqrt(np.mean(expected[:, 2] ** 2)), abs=1e-9)
        assert np.allclose(out[:, 1:], expected, atol=1e-9)

    def test_idempotent_and_norm_preserving(self):
        rng = np.random.default_rng(4)
        imu = np.column_stack([np.arange(300), rng.normal([3.0, -2.0, 9.0], 0.3, size=(300, 3))])
        once = reorient_imu(imu)
        assert np.allclose(reorient_imu(once), once, atol=1e-9)
        assert np.allclose(np.linalg.norm(once[:, 1:], axis=1), np.linalg.norm(imu[:, 1:], axis=1), atol=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(InsufficientSamples):
            reorient_imu(make_trace().imu[:99])

    def test_degenerate_gravity(self):
        imu = make_trace().imu.copy()
        imu[:, 3] = 0.5
        with pytest.raises(DegenerateGravity):
            reorient_imu(imu)


class TestValidate:
    def test_clean_trace(self):
        report = validate_trace(make_trace())
        assert report.ok
        assert report.counts["gps"] == 3
        assert report.span == (T0, T0 + 2000)

    def test_wifi_two_hours_late(self):
        late = WifiScan(T0 + 2 * 3600 * 1000, frozenset({"aa:bb"}))
        report = validate_trace(make_trace(wifi=(late,)))
        assert report.kinds() == ["stream out of span"]

    def test_adhoc_with_busstop(self):
        mark = GroundTruthMark(T0 + 1000, frozenset({StayType.AD_HOC, StayType.BUS_STOP}))
        report = validate_trace(make_trace(marks=(mark,)))
        assert report.kinds() == ["ad-hoc exclusivity"]

    def test_unmatched_mark(self):
        from bustop.staypoint import ClusterParams, find_stays

        trace = make_trace(marks=(GroundTruthMark(T0 + 30_000, frozenset({StayType.TURN})),))
        stays = find_stays(trace, ClusterParams())
        report = validate_trace(trace, stays, ClusterParams().label_slack_s)
        assert report.kinds() == ["unmatched mark"]
