"""Trip directory ingestion, serialization, validation and IMU reorientation.

A trip directory holds one file per stream (all UTF-8 text except the raw PCM):

    gps.csv      t_ms,lat,lon,speed_mps        one row per second
    imu.csv      t_ms,ax,ay,az,gx,gy,gz        gyroscope columns are read and discarded
    wifi.csv     t_ms,bssid                    one row per sighted access point per scan
    labels.csv   t_ms,types                    types is a `|`-separated StayType list
    audio.pcm    mono signed 16-bit little-endian PCM
    audio.json   {"sample_rate": 8000, "t0_ms": <int>}
    meta.json    optional {"trip_id", "direction", "utc_offset_min"}

Headers are mandatory and column order is fixed, so every malformed row can be reported
with its line number. parse_trip() rejects every invariant violation, including records
outside the GPS span and ad-hoc marks combined with other types. validate_trace() reports
the same checks, plus unmatched marks, as data for traces built in memory.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from loguru import logger

from .models import (
    SAMPLE_RATE,
    AudioStream,
    BustopError,
    Direction,
    GeoPoint,
    GroundTruthMark,
    ImuSample,
    StayLocation,
    StayType,
    TripTrace,
    WifiScan,
    is_exclusive,
)

GPS_HEADER = ["t_ms", "lat", "lon", "speed_mps"]
IMU_HEADER = ["t_ms", "ax", "ay", "az", "gx", "gy", "gz"]
WIFI_HEADER = ["t_ms", "bssid"]
LABELS_HEADER = ["t_ms", "types"]
TRIP_FILES = ("gps.csv", "imu.csv", "wifi.csv", "labels.csv", "audio.pcm", "audio.json")

SPAN_SLACK_MS = 60_000
MIN_IMU_SAMPLES = 100
MIN_GRAVITY = 1.0


class MissingFile(BustopError):
    def __init__(self, path: Path) -> None:
        super().__init__(f"{path}: required trip file is missing")


class MalformedRecord(BustopError):
    def __init__(self, path: Path, line: int, reason: str) -> None:
        self.line = line
        super().__init__(f"{path.name}:{line}: {reason}")


class NonMonotonicTimestamp(BustopError):
    def __init__(self, path: Path, line: int, t: int, previous: int) -> None:
        self.line = line
        super().__init__(f"{path.name}:{line}: timestamp {t} does not advance past {previous}")


class WrongSampleRate(BustopError):
    def __init__(self, rate: int) -> None:
        super().__init__(f"audio sample rate {rate} Hz is not supported (only {SAMPLE_RATE} Hz)")


class InsufficientSamples(BustopError):
    def __init__(self, count: int) -> None:
        super().__init__(f"{count} IMU samples cannot estimate gravity (need at least {MIN_IMU_SAMPLES})")


class DegenerateGravity(BustopError):
    def __init__(self, magnitude: float) -> None:
        super().__init__(f"mean acceleration {magnitude:.3f} m/s² is too small for a stable gravity estimate")


def _rows(path: Path, header: list[str]) -> Iterator[tuple[int, list[str]]]:
    """Yield (line number, fields) for every data row, after checking the header."""
    if not path.exists():
        raise MissingFile(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        first = next(reader, None)
        if first != header:
            raise MalformedRecord(path, 1, f"expected header {','.join(header)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRecord(path, reader.line_num, f"expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, row


def _int(path: Path, line: int, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedRecord(path, line, f"not an integer: {text!r}") from None


def _float(path: Path, line: int, text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MalformedRecord(path, line, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise MalformedRecord(path, line, f"not finite: {text!r}")
    return value


def _parse_gps(path: Path) -> tuple[GeoPoint, ...]:
    points: list[GeoPoint] = []
    for line, (t, lat, lon, speed) in _rows(path, GPS_HEADER):
        point = GeoPoint(
            _float(path, line, lat), _float(path, line, lon), _int(path, line, t), _float(path, line, speed)
        )
        if not -90 <= point.lat <= 90:
            raise MalformedRecord(path, line, f"latitude {point.lat} out of range")
        if not -180 <= point.lon <= 180:
            raise MalformedRecord(path, line, f"longitude {point.lon} out of range")
        if point.speed < 0:
            raise MalformedRecord(path, line, f"negative speed {point.speed}")
        if points and point.t <= points[-1].t:
            raise NonMonotonicTimestamp(path, line, point.t, points[-1].t)
        points.append(point)
    if not points:
        raise MalformedRecord(path, 2, "GPS trail is empty")
    return tuple(points)


def _parse_imu(path: Path) -> np.ndarray:
    """Fast path through numpy; on failure, rescan line by line to name the bad record."""
    rows = _rows(path, IMU_HEADER)  # checks existence and header lazily
    first = next(rows, None)
    rows.close()
    if first is None:
        return np.zeros((0, 4))
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError:
        for line, fields in _rows(path, IMU_HEADER):
            _int(path, line, fields[0])
            for text in fields[1:]:
                _float(path, line, text)
        raise MalformedRecord(path, 0, "unreadable IMU data") from None
    if data.shape[1] != len(IMU_HEADER):
        raise MalformedRecord(path, 2, f"expected {len(IMU_HEADER)} fields, got {data.shape[1]}")
    if not np.isfinite(data).all():
        bad = int(np.argmax(~np.isfinite(data).all(axis=1)))
        raise MalformedRecord(path, bad + 2, "non-finite IMU value")
    fractional = data[:, 0] != np.round(data[:, 0])
    if fractional.any():
        bad = int(np.argmax(fractional))
        raise MalformedRecord(path, bad + 2, f"not an integer: {data[bad, 0]!r}")
    steps = np.diff(data[:, 0])
    if (steps < 0).any():
        bad = int(np.argmax(steps < 0)) + 1
        raise NonMonotonicTimestamp(path, bad + 2, int(data[bad, 0]), int(data[bad - 1, 0]))
    return data[:, :4]


def _check_span(path: Path, line: int, t: int, span: tuple[int, int]) -> None:
    lo, hi = span
    if not lo - SPAN_SLACK_MS <= t <= hi + SPAN_SLACK_MS:
        raise MalformedRecord(path, line, f"t={t} outside the GPS span [{lo}, {hi}] ± 60 s")


def _parse_wifi(path: Path, span: tuple[int, int]) -> tuple[WifiScan, ...]:
    scans: dict[int, set[str]] = {}
    for line, (t, bssid) in _rows(path, WIFI_HEADER):
        if not bssid:
            raise MalformedRecord(path, line, "empty BSSID")
        t_ms = _int(path, line, t)
        _check_span(path, line, t_ms, span)
        scans.setdefault(t_ms, set()).add(bssid)
    return tuple(WifiScan(t, frozenset(bssids)) for t, bssids in sorted(scans.items()))


def _parse_labels(path: Path, span: tuple[int, int]) -> tuple[GroundTruthMark, ...]:
    marks: list[GroundTruthMark] = []
    for line, (t, types) in _rows(path, LABELS_HEADER):
        try:
            parsed = StayType.parse_set(types)
        except ValueError:
            raise MalformedRecord(path, line, f"unknown stay type in {types!r}") from None
        if not parsed:
            raise MalformedRecord(path, line, "empty stay type set")
        if not is_exclusive(parsed):
            raise MalformedRecord(path, line, f"AdHoc cannot be combined with other types: {types!r}")
        t_ms = _int(path, line, t)
        _check_span(path, line, t_ms, span)
        marks.append(GroundTruthMark(t_ms, parsed))
    return tuple(sorted(marks, key=lambda m: m.t))


def _parse_audio(pcm_path: Path, json_path: Path) -> AudioStream:
    for path in (pcm_path, json_path):
        if not path.exists():
            raise MissingFile(path)
    try:
        header = json.loads(json_path.read_text(encoding="utf-8"))
        rate = int(header["sample_rate"])
        t0 = int(header["t0_ms"])
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedRecord(json_path, 1, f"bad audio header: {e}") from None
    if rate != SAMPLE_RATE:
        raise WrongSampleRate(rate)
    raw = pcm_path.read_bytes()
    if len(raw) % 2:
        raise MalformedRecord(pcm_path, 0, "odd byte count for 16-bit PCM")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    return AudioStream(samples=samples, t0=t0, sample_rate=rate)


def _parse_meta(path: Path, default_id: str, utc_offset_min: int) -> tuple[str, Direction, int]:
    if not path.exists():
        return default_id, Direction.UP, utc_offset_min
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
        return (
            str(meta.get("trip_id", default_id)),
            Direction(meta.get("direction", Direction.UP)),
            int(meta.get("utc_offset_min", utc_offset_min)),
        )
    except (ValueError, TypeError, AttributeError) as e:
        raise MalformedRecord(path, 1, f"bad trip metadata: {e}") from None


def parse_trip(dir_path: Path | str, utc_offset_min: int = 330) -> TripTrace:
    """Load a trip directory into a TripTrace whose streams are sorted by time."""
    root = Path(dir_path)
    for name in TRIP_FILES:
        if not (root / name).exists():
            raise MissingFile(root / name)

    trip_id, direction, utc_offset_min = _parse_meta(root / "meta.json", root.name, utc_offset_min)
    gps = _parse_gps(root / "gps.csv")
    span = (gps[0].t, gps[-1].t)

    imu = _parse_imu(root / "imu.csv")
    if len(imu):
        _check_span(root / "imu.csv", 2, int(imu[0, 0]), span)
        _check_span(root / "imu.csv", len(imu) + 1, int(imu[-1, 0]), span)
    audio = _parse_audio(root / "audio.pcm", root / "audio.json")
    if len(audio):
        _check_span(root / "audio.json", 1, audio.t0, span)
        _check_span(root / "audio.json", 1, audio.t0 + len(audio) * 1000 // audio.sample_rate, span)

    trace = TripTrace(
        trip_id=trip_id,
        direction=direction,
        gps=gps,
        imu=imu,
        audio=audio,
        wifi=_parse_wifi(root / "wifi.csv", span),
        marks=_parse_labels(root / "labels.csv", span),
        utc_offset_min=utc_offset_min,
    )
    logger.debug(
        f"{trace.trip_id}: {len(trace.gps)} GPS fixes, {len(trace.imu)} IMU samples, "
        f"{len(trace.wifi)} WiFi scans, {len(trace.marks)} marks"
    )
    return trace


def write_trip(trace: TripTrace, dir_path: Path | str) -> Path:
    """Serialize `trace` to the trip directory layout. Floats are written so they parse back bit-exactly."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)

    with (root / "gps.csv").open("w", newline="", encoding="utf-8") as f:
        f.write(",".join(GPS_HEADER) + "\n")
        for p in trace.gps:
            f.write(f"{p.t},{p.lat!r},{p.lon!r},{p.speed!r}\n")

    imu = np.zeros((len(trace.imu), 7))
    imu[:, :4] = trace.imu
    np.savetxt(
        root / "imu.csv",
        imu,
        delimiter=",",
        header=",".join(IMU_HEADER),
        comments="",
        fmt=["%d"] + ["%.17g"] * 6,
    )

    with (root / "wifi.csv").open("w", newline="", encoding="utf-8") as f:
        f.write(",".join(WIFI_HEADER) + "\n")
        for scan in trace.wifi:
            for bssid in sorted(scan.bssids):
                f.write(f"{scan.t},{bssid}\n")

    with (root / "labels.csv").open("w", newline="", encoding="utf-8") as f:
        f.write(",".join(LABELS_HEADER) + "\n")
        for mark in trace.marks:
            f.write(f"{mark.t},{StayType.format_set(mark.types)}\n")

    trace.audio.samples.astype("<i2").tofile(root / "audio.pcm")
    audio_header = {"sample_rate": trace.audio.sample_rate, "t0_ms": trace.audio.t0}
    (root / "audio.json").write_text(json.dumps(audio_header), encoding="utf-8")

    meta = {"trip_id": trace.trip_id, "direction": trace.direction.value, "utc_offset_min": trace.utc_offset_min}
    (root / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    return root


def _rotation_to_z(g: np.ndarray) -> np.ndarray:
    """The minimal rotation matrix taking unit vector `g` onto +z (Rodrigues)."""
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(g, z)
    s = float(np.linalg.norm(v))
    c = float(g @ z)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])  # half turn about x
    k = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + k + k @ k * ((1 - c) / s**2)


def reorient_imu(imu: np.ndarray | Sequence[ImuSample]) -> np.ndarray:
    """Rotate device-frame accelerations so the trip-mean acceleration (gravity) points along +z.

    Accepts an (n, 4) array of t, ax, ay, az or a sequence of ImuSample, and returns an
    (n, 4) array in the same column layout. Per-sample norms are preserved.
    """
    data = np.asarray(imu, dtype=np.float64).reshape(-1, 4)
    if len(data) < MIN_IMU_SAMPLES:
        raise InsufficientSamples(len(data))
    gravity = data[:, 1:].mean(axis=0)
    magnitude = float(np.linalg.norm(gravity))
    if magnitude < MIN_GRAVITY:
        raise DegenerateGravity(magnitude)
    rotation = _rotation_to_z(gravity / magnitude)
    out = data.copy()
    out[:, 1:] = data[:, 1:] @ rotation.T
    return out


class Violation(NamedTuple):
    kind: str
    detail: str


@dataclass
class ValidationReport:
    """Per-stream record counts, the GPS time span and every invariant violation found."""

    counts: dict[str, int]
    span: tuple[int, int] | None
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


def _out_of_span(kind: str, times: Iterable[int], lo: int, hi: int) -> Iterator[Violation]:
    for t in times:
        if not lo - SPAN_SLACK_MS <= t <= hi + SPAN_SLACK_MS:
            yield Violation("stream out of span", f"{kind} record at t={t} outside [{lo}, {hi}] ± 60 s")


def validate_trace(
    trace: TripTrace, stays: Sequence[StayLocation] | None = None, slack_s: float = 10.0
) -> ValidationReport:
    """List every invariant violation in `trace`. Violations are data, never exceptions.

    When `stays` is given, ground-truth marks that fall in no stay's [t_start, t_end] ±
    `slack_s` window are reported as unmatched.
    """
    report = ValidationReport(
        counts={
            "gps": len(trace.gps),
            "imu": len(trace.imu),
            "audio": len(trace.audio),
            "wifi": len(trace.wifi),
            "marks": len(trace.marks),
        },
        span=(trace.t_first, trace.t_last) if trace.gps else None,
    )
    found = report.violations
    if not trace.gps:
        found.append(Violation("empty gps", "GPS trail has no fixes"))
        return report

    for previous, point in zip(trace.gps, trace.gps[1:]):
        if point.t <= previous.t:
            found.append(Violation("non-monotonic", f"gps t={point.t} after t={previous.t}"))
    for point in trace.gps:
        if not (-90 <= point.lat <= 90 and -180 <= point.lon <= 180) or point.speed < 0:
            found.append(Violation("gps range", f"gps fix at t={point.t} out of range"))

    if len(trace.imu):
        if not np.isfinite(trace.imu).all():
            found.append(Violation("imu not finite", "IMU stream contains non-finite values"))
        if (np.diff(trace.imu[:, 0]) < 0).any():
            found.append(Violation("non-monotonic", "IMU timestamps decrease"))

    if trace.audio.sample_rate != SAMPLE_RATE:
        found.append(Violation("sample rate", f"audio at {trace.audio.sample_rate} Hz"))

    lo, hi = trace.t_first, trace.t_last
    found.extend(_out_of_span("imu", (int(trace.imu[0, 0]), int(trace.imu[-1, 0])) if len(trace.imu) else (), lo, hi))
    if len(trace.audio):
        audio_end = trace.audio.t0 + len(trace.audio) * 1000 // trace.audio.sample_rate
        found.extend(_out_of_span("audio", (trace.audio.t0, audio_end), lo, hi))
    found.extend(_out_of_span("wifi", (scan.t for scan in trace.wifi), lo, hi))
    found.extend(_out_of_span("label", (mark.t for mark in trace.marks), lo, hi))

    for mark in trace.marks:
        if not mark.types:
            found.append(Violation("empty mark", f"mark at t={mark.t} has no types"))
        elif not is_exclusive(mark.types):
            found.append(Violation("ad-hoc exclusivity", f"mark at t={mark.t}: {StayType.format_set(mark.types)}"))

    if stays is not None:
        slack_ms = slack_s * 1000
        for mark in trace.marks:
            if not any(s.t_start - slack_ms <= mark.t <= s.t_end + slack_ms for s in stays):
                found.append(Violation("unmatched mark", f"mark at t={mark.t} matches no stay-location"))

    return report
