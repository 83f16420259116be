"""Per-stay feature vectors f1-f13.

f1      stay duration (count of 1 Hz GPS fixes in the stay)
f2-f6   top five per-coefficient mean MFCCs of the stay audio, descending
f7      distinct WiFi access points scanned during the stay
f8      distinct access points scanned on the edge from the previous stay
f9      road surface index over the 50 m approach
f10-f13 map encoding of the 300 m box around the centroid (see mapenc)

features.csv holds one row per stay: `stay_id,f1,...,f13,labels`, labels being the
`|`-separated truth set (possibly empty).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

from .acoustics import MfccConfig, WindowTooShort, mfcc
from .geometry import haversine
from .mapenc import BOX_METERS, TileStore, spatial_features
from .models import BustopError, StayLocation, StayType, TripTrace

FEATURE_NAMES = tuple(f"f{i}" for i in range(1, 14))
RSI_APPROACH_M = 50.0


class FeatureVector(NamedTuple):
    f1: float  # stay duration, s
    f2: float  # MFCC means, descending
    f3: float
    f4: float
    f5: float
    f6: float
    f7: int  # WiFi at stay
    f8: int  # WiFi on edge
    f9: float  # RSI
    f10: float  # % residential
    f11: float  # % natural
    f12: float  # % road
    f13: int  # special landmark present

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> FeatureVector:
        v = [float(x) for x in values]
        return cls(*v[:6], int(round(v[6])), int(round(v[7])), *v[8:12], int(round(v[12])))


class NoAudioInWindow(BustopError):
    def __init__(self, stay_id: str, samples: int) -> None:
        super().__init__(f"{stay_id}: {samples} audio samples in the stay, less than one frame")


class NoMotionBeforeStay(BustopError):
    def __init__(self, stay_id: str) -> None:
        super().__init__(f"{stay_id}: bus did not move before the stay")


class NoImuInWindow(BustopError):
    def __init__(self, stay_id: str, t_start: int, t_end: int) -> None:
        super().__init__(f"{stay_id}: no IMU samples in approach window [{t_start}, {t_end})")


class MissingFeature(BustopError):
    """A stay whose vector could not be built. Names the features that failed and why."""

    def __init__(self, stay_id: str, features: str, reason: str) -> None:
        self.stay_id = stay_id
        self.features = features
        self.reason = reason
        super().__init__(f"{stay_id}: {features} unavailable ({reason})")


def top5_mfcc(trace: TripTrace, stay: StayLocation, cfg: MfccConfig = MfccConfig()) -> tuple[float, ...]:
    window = trace.audio.window(stay.t_start, stay.t_end)
    try:
        coefficients = mfcc(window, cfg)
    except WindowTooShort:
        raise NoAudioInWindow(stay.stay_id, len(window)) from None
    means = np.sort(coefficients.mean(axis=0))[::-1]
    return tuple(float(c) for c in means[:5])


def _distinct_bssids(trace: TripTrace, lo: int, hi: int, closed: bool) -> int:
    seen: set[str] = set()
    for scan in trace.wifi:
        if lo <= scan.t <= hi if closed else lo < scan.t < hi:
            seen |= scan.bssids
    return len(seen)


def wifi_count_at_stay(trace: TripTrace, stay: StayLocation) -> int:
    return _distinct_bssids(trace, stay.t_start, stay.t_end, closed=True)


def wifi_count_on_edge(trace: TripTrace, prev: StayLocation | None, cur: StayLocation) -> int:
    """Distinct APs strictly between the previous stay's end and this stay's start.

    With no previous stay the edge starts at the trip's first GPS fix, inclusive.
    """
    if prev is None:
        return _distinct_bssids(trace, trace.t_first - 1, cur.t_start, closed=False)
    assert prev.t_end <= cur.t_start, "stays out of order"
    return _distinct_bssids(trace, prev.t_end, cur.t_start, closed=False)


def approach_window(trace: TripTrace, stay: StayLocation, meters: float = RSI_APPROACH_M) -> tuple[int, int]:
    """[t_w, t_start): the time span covering the last `meters` of travel before the stay.

    Walks back fix by fix from the stay's first member until the accumulated distance reaches
    `meters`, or the trip start if less was travelled.
    """
    first = int(np.searchsorted(trace.gps_t, stay.t_start))
    j = first
    travelled = 0.0
    while j > 0 and travelled < meters:
        travelled += haversine(trace.gps[j - 1].latlon, trace.gps[j].latlon)
        j -= 1
    return trace.gps[j].t, stay.t_start


def rsi(trace: TripTrace, stay: StayLocation) -> float:
    """RMS of gravity-removed vertical acceleration over mean GPS speed on the approach."""
    t_w, t_end = approach_window(trace, stay)
    gps = slice(*np.searchsorted(trace.gps_t, [t_w, t_end]))
    speeds = trace.gps_speed[gps]
    if len(speeds) == 0 or speeds.mean() <= 0:
        raise NoMotionBeforeStay(stay.stay_id)
    imu = slice(*np.searchsorted(trace.imu[:, 0], [t_w, t_end]))
    residual = trace.vertical_residual[imu]
    if len(residual) == 0:
        raise NoImuInWindow(stay.stay_id, t_w, t_end)
    return float(np.sqrt(np.mean(residual**2)) / speeds.mean())


@dataclass(frozen=True)
class FeatureParams:
    mfcc: MfccConfig = MfccConfig()
    box_m: float = BOX_METERS
    box_n: float = BOX_METERS


def build_feature_vector(
    trace: TripTrace,
    prev_stay: StayLocation | None,
    stay: StayLocation,
    tile_store: TileStore,
    params: FeatureParams = FeatureParams(),
) -> FeatureVector:
    """Compose f1-f13. Any component failure raises MissingFeature naming the affected features."""
    try:
        f2_f6 = top5_mfcc(trace, stay, params.mfcc)
    except BustopError as e:
        raise MissingFeature(stay.stay_id, "f2..f6", str(e)) from e
    try:
        f9 = rsi(trace, stay)
    except BustopError as e:
        raise MissingFeature(stay.stay_id, "f9", str(e)) from e
    try:
        spatial = spatial_features(tile_store, stay.centroid, params.box_m, params.box_n)
    except BustopError as e:
        raise MissingFeature(stay.stay_id, "f10..f13", str(e)) from e
    return FeatureVector(
        float(stay.duration_s),
        *f2_f6,
        wifi_count_at_stay(trace, stay),
        wifi_count_on_edge(trace, prev_stay, stay),
        f9,
        *spatial,
    )


class FeatureRecord(NamedTuple):
    stay_id: str
    vector: FeatureVector
    labels: frozenset[StayType]


def featurize_trip(
    trace: TripTrace,
    stays: Sequence[StayLocation],
    tile_store: TileStore,
    params: FeatureParams = FeatureParams(),
    n_jobs: int = 1,
) -> tuple[list[FeatureRecord], list[MissingFeature]]:
    """Feature records for every stay of a trip, in stay order, plus the stays that failed."""

    def one(prev: StayLocation | None, stay: StayLocation) -> FeatureRecord | MissingFeature:
        try:
            return FeatureRecord(stay.stay_id, build_feature_vector(trace, prev, stay, tile_store, params), stay.truth)
        except MissingFeature as e:
            return e

    previous = [None, *stays[:-1]]
    results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(p, s) for p, s in zip(previous, stays))
    records = [r for r in results if isinstance(r, FeatureRecord)]
    missing = [r for r in results if isinstance(r, MissingFeature)]
    for m in missing:
        logger.warning(f"Skipping {m}")
    logger.info(f"{trace.trip_id}: featurized {len(records)}/{len(stays)} stays")
    return records, missing


def write_features(path: Path | str, records: Sequence[FeatureRecord]) -> None:
    frame = pd.DataFrame(
        [[r.stay_id, *r.vector, StayType.format_set(r.labels)] for r in records],
        columns=["stay_id", *FEATURE_NAMES, "labels"],
    )
    frame.to_csv(path, index=False, float_format="%.17g")


def read_features(path: Path | str) -> list[FeatureRecord]:
    try:
        frame = pd.read_csv(path, dtype={"stay_id": str, "labels": str}, keep_default_na=False)
    except (OSError, ValueError) as e:
        raise BustopError(f"cannot load features {path}: {e}") from e
    expected = ["stay_id", *FEATURE_NAMES, "labels"]
    if list(frame.columns) != expected:
        raise BustopError(f"{path}: header {list(frame.columns)} is not {expected}")
    try:
        values = frame[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
        labels = [StayType.parse_set(text) for text in frame["labels"]]
    except ValueError as e:
        raise BustopError(f"{path}: {e}") from e
    if not np.isfinite(values).all():
        raise BustopError(f"{path}: non-finite feature values")
    return [
        FeatureRecord(stay_id, FeatureVector.from_array(row), types)
        for stay_id, row, types in zip(frame["stay_id"], values, labels)
    ]
