"""Domain types shared by every stage of the pipeline.

StayType: the five reasons a bus stays somewhere (one-vs-all targets).
Direction: Up (terminus to railway station) or Down trails.
TimeBand: the four collection windows that govern stay-duration profiles.
GeoPoint, ImuSample, WifiScan, GroundTruthMark, AudioStream: one record of each sensor stream.
TripTrace: one bus trip's synchronized multi-modal streams.
StayLocation: a clustered zero-speed region with its members, duration and labels.

Timestamps are unix epoch milliseconds everywhere. All types are immutable after
construction; TripTrace freezes its numpy buffers so traces can be shared across threads.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from .geometry import LatLon


class BustopError(ValueError):
    """Base class for data errors. The CLI maps these to exit code 1."""


class StayType(StrEnum):
    """Reason for a stay. AdHoc is exclusive: it never co-occurs with another type."""

    BUS_STOP = "BusStop"
    SIGNAL = "Signal"
    CONGESTION = "Congestion"
    TURN = "Turn"
    AD_HOC = "AdHoc"

    @classmethod
    def parse_set(cls, text: str) -> frozenset[StayType]:
        """Parse a `|`-separated list of names, e.g. ``BusStop|Signal``. Empty text is the empty set."""
        if not text.strip():
            return frozenset()
        return frozenset(cls(name.strip()) for name in text.split("|"))

    @staticmethod
    def format_set(types: frozenset[StayType]) -> str:
        """Inverse of parse_set, in declaration order so output is stable."""
        return "|".join(t.value for t in StayType if t in types)


REGULAR_TYPES = (StayType.BUS_STOP, StayType.SIGNAL, StayType.CONGESTION, StayType.TURN)


def is_exclusive(types: frozenset[StayType]) -> bool:
    """Ad-hoc exclusivity: AdHoc in types implies types == {AdHoc}."""
    return StayType.AD_HOC not in types or types == {StayType.AD_HOC}


class Direction(StrEnum):
    UP = "Up"
    DOWN = "Down"


class TimeBand(StrEnum):
    """Local-time collection windows: 06-09, 09-13, 13-17, 17-21."""

    EARLY_MORNING = "EarlyMorning"
    MORNING = "Morning"
    AFTERNOON = "Afternoon"
    EVENING = "Evening"


class GeoPoint(NamedTuple):
    """One 1 Hz GPS fix."""

    lat: float
    lon: float
    t: int
    speed: float

    @property
    def latlon(self) -> LatLon:
        return LatLon(self.lat, self.lon)


class ImuSample(NamedTuple):
    """One accelerometer reading in the device frame (m/s²)."""

    t: int
    ax: float
    ay: float
    az: float


class WifiScan(NamedTuple):
    t: int
    bssids: frozenset[str]


class GroundTruthMark(NamedTuple):
    t: int
    types: frozenset[StayType]


SAMPLE_RATE = 8000


@dataclass(frozen=True, eq=False)
class AudioStream:
    """Mono signed 16-bit PCM. Only 8 kHz streams are accepted by the parser."""

    samples: np.ndarray
    t0: int
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AudioStream):
            return NotImplemented
        return (
            self.t0 == other.t0
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.samples, other.samples)
        )

    def __len__(self) -> int:
        return len(self.samples)

    def index_of(self, t: int) -> int:
        """Sample index at time `t` (ms), clamped to the stream."""
        index = (t - self.t0) * self.sample_rate // 1000
        return max(0, min(len(self.samples), index))

    def window(self, t_start: int, t_end: int) -> np.ndarray:
        """Samples covering [t_start, t_end] as float64."""
        return self.samples[self.index_of(t_start) : self.index_of(t_end)].astype(np.float64)


IMU_COLUMNS = ("t", "ax", "ay", "az")


@dataclass(frozen=True, eq=False)
class TripTrace:
    """One bus trip's streams, each sorted by time.

    The IMU stream is held as an (n, 4) float64 array with columns t, ax, ay, az; at
    197 Hz a trip has hundreds of thousands of samples, too many for per-record tuples.
    Use `imu_samples()` for record access.
    """

    trip_id: str
    direction: Direction
    gps: tuple[GeoPoint, ...]
    imu: np.ndarray
    audio: AudioStream
    wifi: tuple[WifiScan, ...] = ()
    marks: tuple[GroundTruthMark, ...] = ()
    utc_offset_min: int = 330

    def __post_init__(self):
        assert self.imu.ndim == 2 and self.imu.shape[1] == 4, "IMU array must have columns t, ax, ay, az"
        self.imu.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripTrace):
            return NotImplemented
        return (
            self.trip_id == other.trip_id
            and self.direction == other.direction
            and self.gps == other.gps
            and np.array_equal(self.imu, other.imu)
            and self.audio == other.audio
            and self.wifi == other.wifi
            and self.marks == other.marks
            and self.utc_offset_min == other.utc_offset_min
        )

    def imu_samples(self) -> list[ImuSample]:
        return [ImuSample(int(t), ax, ay, az) for t, ax, ay, az in self.imu.tolist()]

    @property
    def t_first(self) -> int:
        return self.gps[0].t

    @property
    def t_last(self) -> int:
        return self.gps[-1].t

    @functools.cached_property
    def gps_t(self) -> np.ndarray:
        return np.array([p.t for p in self.gps], dtype=np.int64)

    @functools.cached_property
    def gps_speed(self) -> np.ndarray:
        return np.array([p.speed for p in self.gps], dtype=np.float64)

    @functools.cached_property
    def vertical_residual(self) -> np.ndarray:
        """Gravity-removed vertical acceleration per IMU sample (trip-mean z subtracted after reorientation)."""
        from .trace import reorient_imu

        z = reorient_imu(self.imu)[:, 3]
        residual = z - z.mean()
        residual.setflags(write=False)
        return residual


@dataclass(frozen=True)
class StayLocation:
    """A clustered zero-speed region. duration_s counts member GPS records (1 Hz)."""

    stay_id: str
    centroid: LatLon
    members: tuple[GeoPoint, ...]
    t_start: int
    t_end: int
    duration_s: int
    band: TimeBand
    truth: frozenset[StayType] = field(default_factory=frozenset)

    def with_truth(self, truth: frozenset[StayType]) -> StayLocation:
        return replace(self, truth=truth)

    def to_json(self) -> dict:
        return {
            "stay_id": self.stay_id,
            "centroid": [self.centroid.lat, self.centroid.lon],
            "members": [list(p) for p in self.members],
            "t_start": self.t_start,
            "t_end": self.t_end,
            "duration_s": self.duration_s,
            "band": self.band.value,
            "truth": StayType.format_set(self.truth),
        }

    @classmethod
    def from_json(cls, record: dict) -> StayLocation:
        return cls(
            stay_id=record["stay_id"],
            centroid=LatLon(*record["centroid"]),
            members=tuple(GeoPoint(lat, lon, int(t), speed) for lat, lon, t, speed in record["members"]),
            t_start=int(record["t_start"]),
            t_end=int(record["t_end"]),
            duration_s=int(record["duration_s"]),
            band=TimeBand(record["band"]),
            truth=StayType.parse_set(record.get("truth", "")),
        )
