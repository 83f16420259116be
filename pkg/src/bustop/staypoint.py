"""Zero-speed extraction and greedy temporal clustering of GPS trails into stay-locations.

A zero-speed point is a GPS fix slower than χ. Consecutive zero-speed points are grouped
greedily in time order: the first unassigned point seeds a cluster, and each later point
joins it while it stays within ρ meters of the seed and within 120 s of the cluster's last
member. Membership is tested against the seed, never a moving centroid, so the result
depends only on input order.

Also here: time-band assignment, ground-truth alignment, stays.json I/O and the
cross-trip snapping that gives regular bus-stops a canonical route position (BS1..BSn).
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from loguru import logger

from .geometry import LatLon, haversine
from .models import BustopError, GeoPoint, GroundTruthMark, StayLocation, StayType, TimeBand, TripTrace

MAX_GAP_MS = 120_000


@dataclass(frozen=True)
class ClusterParams:
    """χ (speed threshold, m/s) and ρ (cluster radius, m), plus the local-time offset used for bands."""

    chi: float = 3.0
    rho: float = 30.0
    utc_offset_min: int = 330

    def __post_init__(self):
        assert self.chi > 0 and self.rho > 0, "chi and rho must be positive"

    @property
    def label_slack_s(self) -> float:
        """Slack for aligning ground-truth marks: the time to cross ρ at speed χ."""
        return self.rho / self.chi


class ZeroSpeedPoint(NamedTuple):
    point: GeoPoint


def extract_zero_speed(trace: TripTrace, p: ClusterParams) -> list[ZeroSpeedPoint]:
    """Exactly the GPS fixes with speed < χ, in temporal order."""
    return [ZeroSpeedPoint(point) for point in trace.gps if point.speed < p.chi]


def assign_timezone(t: int, utc_offset_min: int) -> TimeBand:
    """Band of the local hour: [6,9) early morning, [9,13) morning, [13,17) afternoon, [17,21) evening.

    Boundary instants belong to the later band. Hours before 06:00 clamp to early morning
    and hours from 21:00 clamp to evening.
    """
    local_seconds = t // 1000 + utc_offset_min * 60
    hour = (local_seconds // 3600) % 24
    if hour < 9:
        return TimeBand.EARLY_MORNING
    if hour < 13:
        return TimeBand.MORNING
    if hour < 17:
        return TimeBand.AFTERNOON
    return TimeBand.EVENING


def _make_stay(stay_id: str, members: list[GeoPoint], p: ClusterParams) -> StayLocation:
    lat = float(np.mean([m.lat for m in members]))
    lon = float(np.mean([m.lon for m in members]))
    return StayLocation(
        stay_id=stay_id,
        centroid=LatLon(lat, lon),
        members=tuple(members),
        t_start=members[0].t,
        t_end=members[-1].t,
        duration_s=len(members),
        band=assign_timezone(members[0].t, p.utc_offset_min),
    )


def cluster_stays(points: Sequence[ZeroSpeedPoint], p: ClusterParams, prefix: str = "S") -> list[StayLocation]:
    """Greedy temporal clustering of zero-speed points into stay-locations.

    Stay ids are `<prefix>-<index>` with a zero-padded index in travel order.
    """
    clusters: list[list[GeoPoint]] = []
    seed: GeoPoint | None = None
    for (point,) in points:
        current = clusters[-1] if clusters else None
        if (
            current is not None
            and seed is not None
            and point.t - current[-1].t <= MAX_GAP_MS
            and haversine(seed.latlon, point.latlon) <= p.rho
        ):
            current.append(point)
        else:
            seed = point
            clusters.append([point])
    return [_make_stay(f"{prefix}-{i:03d}", members, p) for i, members in enumerate(clusters)]


def find_stays(trace: TripTrace, p: ClusterParams) -> list[StayLocation]:
    """Extract and cluster in one step, naming stays after the trip."""
    stays = cluster_stays(extract_zero_speed(trace, p), p, prefix=trace.trip_id)
    logger.debug(f"{trace.trip_id}: {len(stays)} stay-locations from {len(trace.gps)} GPS fixes")
    return stays


def label_stays(
    stays: Sequence[StayLocation], marks: Iterable[GroundTruthMark], slack_s: float
) -> tuple[list[StayLocation], list[GroundTruthMark]]:
    """Give each stay the union of mark types whose time falls in its span ± `slack_s`.

    Returns the labeled stays and the marks that matched no stay.
    """
    slack_ms = slack_s * 1000
    truth: list[set[StayType]] = [set() for _ in stays]
    unmatched: list[GroundTruthMark] = []
    for mark in marks:
        hits = [i for i, s in enumerate(stays) if s.t_start - slack_ms <= mark.t <= s.t_end + slack_ms]
        if not hits:
            unmatched.append(mark)
            continue
        # A mark inside a stay's own span wins over one only inside the slack of a neighbour.
        inside = [i for i in hits if stays[i].t_start <= mark.t <= stays[i].t_end]
        target = (inside or hits)[0]
        truth[target].update(mark.types)
    labeled = [stay.with_truth(frozenset(types)) for stay, types in zip(stays, truth)]
    if unmatched:
        logger.warning(f"{len(unmatched)} ground-truth marks matched no stay-location")
    return labeled, unmatched


def odometer(trace: TripTrace) -> np.ndarray:
    """Cumulative distance travelled (m) at each GPS fix."""
    steps = [haversine(a.latlon, b.latlon) for a, b in zip(trace.gps, trace.gps[1:])]
    return np.concatenate([[0.0], np.cumsum(steps)])


def stay_odometers(trace: TripTrace, stays: Sequence[StayLocation]) -> dict[str, float]:
    """Distance travelled from trip start to each stay's first member."""
    travelled = odometer(trace)
    index = np.searchsorted(trace.gps_t, [s.t_start for s in stays])
    return {s.stay_id: float(travelled[i]) for s, i in zip(stays, index)}


def snap_route_positions(
    trips: Sequence[Sequence[StayLocation]], odometers: Mapping[str, float], rho: float
) -> dict[str, str]:
    """Assign regular bus-stops across trips of one direction to canonical positions BS1..BSn.

    A bus-stop joins the nearest existing position whose first centroid lies within ρ,
    otherwise it opens a new one. Positions are numbered by mean odometer so BS1 is the
    first stop after the terminus. Returns stay_id → position name.
    """
    seeds: list[LatLon] = []
    members: list[list[str]] = []
    for stays in trips:
        for stay in stays:
            if StayType.BUS_STOP not in stay.truth:
                continue
            distances = [haversine(seed, stay.centroid) for seed in seeds]
            nearest = int(np.argmin(distances)) if distances else -1
            if nearest >= 0 and distances[nearest] <= rho:
                members[nearest].append(stay.stay_id)
            else:
                seeds.append(stay.centroid)
                members.append([stay.stay_id])
    order = sorted(range(len(seeds)), key=lambda i: (np.mean([odometers[s] for s in members[i]]), i))
    return {stay_id: f"BS{rank + 1}" for rank, i in enumerate(order) for stay_id in members[i]}


def write_stays(path: Path | str, stays: Sequence[StayLocation]) -> None:
    Path(path).write_text(json.dumps([s.to_json() for s in stays], indent=1), encoding="utf-8")


def read_stays(path: Path | str) -> list[StayLocation]:
    try:
        return [StayLocation.from_json(record) for record in json.loads(Path(path).read_text(encoding="utf-8"))]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise BustopError(f"cannot load stays {path}: {e}") from e
