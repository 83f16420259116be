"""Expected arrival time over a chain of characterized stay-locations.

The chain is Markovian: the arrival at a stay depends only on the arrival at the previous
one. From a known arrival at stop i,

    arrival(i) = depart
    arrival(l) = arrival(l−1) + dwell(type(l−1), band(arrival(l−1))) + distance(l−1, l) / speed

where dwell is the profile's mean stay duration for the stop's (predicted) type set in the
time band of the predicted arrival. A confounded stop waits for its longest type. Errors
are predicted minus actual, in minutes, so an early prediction is negative.
"""

from __future__ import annotations

import datetime as dt
import json
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from loguru import logger

from .geometry import LatLon, haversine
from .models import BustopError, StayLocation, StayType, TimeBand, TripTrace
from .staypoint import assign_timezone

DEFAULT_SPEED = 17.0  # m/s


class EmptyTrainingSet(BustopError):
    def __init__(self) -> None:
        super().__init__("no labeled stays to fit a stay-duration profile")


class NoCommonTrips(BustopError):
    def __init__(self, i: str, j: str) -> None:
        super().__init__(f"no trip visits both {i} and {j}")


@dataclass(frozen=True)
class StayProfile:
    """Mean stay duration (s) per (type, band), with per-type and global fallbacks."""

    mean_duration: dict[tuple[StayType, TimeBand], float]
    fallback_by_type: dict[StayType, float]
    global_fallback: float

    def mean(self, stay_type: StayType, band: TimeBand) -> float:
        if (value := self.mean_duration.get((stay_type, band))) is not None:
            return value
        return self.fallback_by_type.get(stay_type, self.global_fallback)

    def dwell(self, types: Iterable[StayType], band: TimeBand) -> float:
        """Longest mean among `types`; the global mean when no type is known."""
        return max((self.mean(t, band) for t in types), default=self.global_fallback)

    def to_json(self) -> dict:
        return {
            "mean_duration": [
                {"type": t.value, "band": b.value, "seconds": s} for (t, b), s in sorted(self.mean_duration.items())
            ],
            "fallback_by_type": {t.value: s for t, s in sorted(self.fallback_by_type.items())},
            "global_fallback": self.global_fallback,
        }

    @classmethod
    def from_json(cls, record: dict) -> StayProfile:
        return cls(
            {(StayType(r["type"]), TimeBand(r["band"])): float(r["seconds"]) for r in record["mean_duration"]},
            {StayType(t): float(s) for t, s in record["fallback_by_type"].items()},
            float(record["global_fallback"]),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> StayProfile:
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise BustopError(f"cannot load profile {path}: {e}") from e


def fit_stay_profile(stays: Iterable[StayLocation]) -> StayProfile:
    """Arithmetic means of labeled stay durations. A multi-type stay counts towards each of its types."""
    by_cell: dict[tuple[StayType, TimeBand], list[int]] = defaultdict(list)
    by_type: dict[StayType, list[int]] = defaultdict(list)
    durations = []
    for stay in stays:
        if not stay.truth:
            continue
        durations.append(stay.duration_s)
        for t in stay.truth:
            by_cell[t, stay.band].append(stay.duration_s)
            by_type[t].append(stay.duration_s)
    if not durations:
        raise EmptyTrainingSet()
    profile = StayProfile(
        {key: float(np.mean(v)) for key, v in by_cell.items()},
        {key: float(np.mean(v)) for key, v in by_type.items()},
        float(np.mean(durations)),
    )
    logger.info(f"Fitted stay profile from {len(durations)} stays over {len(by_cell)} (type, band) cells")
    return profile


class ChainStop(NamedTuple):
    stay_id: str
    centroid: LatLon
    actual_arrival: int  # ms, first zero-speed fix
    truth: frozenset[StayType]
    predicted: frozenset[StayType] | None = None
    position: str | None = None  # canonical bus-stop name, e.g. BS3

    @property
    def types(self) -> frozenset[StayType]:
        """Types driving the dwell term: the classifier's when available, else the truth."""
        return self.predicted if self.predicted is not None else self.truth

    @property
    def misclassified(self) -> bool:
        return self.predicted is not None and self.predicted != self.truth


@dataclass(frozen=True)
class RouteChain:
    trip_id: str
    stops: tuple[ChainStop, ...]
    utc_offset_min: int = 330

    @property
    def distances(self) -> tuple[float, ...]:
        """Haversine distance (m) from each stop to the next."""
        return tuple(haversine(a.centroid, b.centroid) for a, b in zip(self.stops, self.stops[1:]))

    def index_of(self, position: str) -> int | None:
        return next((i for i, s in enumerate(self.stops) if s.position == position), None)

    @property
    def local_date(self) -> dt.date:
        t = self.stops[0].actual_arrival
        return dt.datetime.fromtimestamp(t / 1000 + self.utc_offset_min * 60, dt.UTC).date()


def build_chain(
    trip_id: str,
    stays: Sequence[StayLocation],
    predicted: Mapping[str, frozenset[StayType]] | None = None,
    positions: Mapping[str, str] | None = None,
    utc_offset_min: int = 330,
) -> RouteChain:
    """Chain over a trip's stays in travel order; actual arrivals are the stays' first fixes."""
    predicted = predicted or {}
    positions = positions or {}
    stops = tuple(
        ChainStop(s.stay_id, s.centroid, s.t_start, s.truth, predicted.get(s.stay_id), positions.get(s.stay_id))
        for s in stays
    )
    return RouteChain(trip_id, stops, utc_offset_min)


def empirical_speed(trace: TripTrace, chi: float = 3.0) -> float:
    """Mean GPS speed over moving fixes (speed ≥ χ)."""
    moving = trace.gps_speed[trace.gps_speed >= chi]
    if len(moving) == 0:
        raise BustopError(f"{trace.trip_id}: no moving GPS fixes to estimate speed")
    return float(moving.mean())


class EtaEstimate(NamedTuple):
    stay_id: str
    predicted_arrival: float  # ms
    error_min: float  # predicted − actual
    misclassified: bool = False  # the stop whose dwell led here had a wrong type set


def predict_arrival(
    chain: RouteChain,
    depart: float,
    profile: StayProfile,
    speed: float = DEFAULT_SPEED,
    start: int = 0,
    stop: int | None = None,
) -> list[EtaEstimate]:
    """Arrivals at stops start..stop (inclusive, default the last), given arrival `depart` at `start`."""
    assert chain.stops, "empty chain"
    assert speed > 0, "speed must be positive"
    stop = len(chain.stops) - 1 if stop is None else stop
    distances = chain.distances
    arrival = float(depart)
    estimates = []
    misclassified = False
    for k in range(start, stop + 1):
        if k > start:
            previous = chain.stops[k - 1]
            band = assign_timezone(int(arrival), chain.utc_offset_min)
            arrival = arrival + profile.dwell(previous.types, band) * 1000 + distances[k - 1] / speed * 1000
            misclassified = misclassified or previous.misclassified
        actual = chain.stops[k].actual_arrival
        estimates.append(EtaEstimate(chain.stops[k].stay_id, arrival, (arrival - actual) / 60_000, misclassified))
    return estimates


@dataclass(frozen=True)
class EtaTable:
    """Upper-triangular mean errors (minutes) between canonical bus-stops."""

    positions: tuple[str, ...]
    errors: pd.DataFrame  # index: from position, columns: to position; NaN when no common trip
    misclassified: frozenset[str] = field(default_factory=frozenset)

    def to_csv(self, path: Path | str) -> None:
        frame = self.errors.copy()
        frame.index.name = "from"
        frame.to_csv(path, float_format="%.4f", na_rep="")


def position_order(name: str) -> tuple[int, str]:
    digits = "".join(c for c in name if c.isdigit())
    return (int(digits) if digits else 0, name)


def pair_error(
    chains: Sequence[RouteChain], i: str, j: str, profile: StayProfile, speed: float = DEFAULT_SPEED
) -> float:
    """Mean over trips of the error at j when predicting from the actual arrival at i."""
    errors = []
    for chain in chains:
        a, b = chain.index_of(i), chain.index_of(j)
        if a is None or b is None or b <= a:
            continue
        estimates = predict_arrival(chain, chain.stops[a].actual_arrival, profile, speed, start=a, stop=b)
        errors.append(estimates[-1].error_min)
    if not errors:
        raise NoCommonTrips(i, j)
    return float(np.mean(errors))


def eta_error_table(chains: Sequence[RouteChain], profile: StayProfile, speed: float = DEFAULT_SPEED) -> EtaTable:
    positions = tuple(
        sorted({s.position for c in chains for s in c.stops if s.position is not None}, key=position_order)
    )
    errors = pd.DataFrame(np.nan, index=list(positions[:-1]), columns=list(positions[1:]), dtype=np.float64)
    for a, i in enumerate(positions):
        for j in positions[a + 1 :]:
            try:
                errors.loc[i, j] = pair_error(chains, i, j, profile, speed)
            except NoCommonTrips as e:
                logger.debug(f"{e}, leaving cell empty")
    missed = frozenset(s.position for c in chains for s in c.stops if s.position is not None and s.misclassified)
    return EtaTable(positions, errors, missed)


def next_stop_errors(chains: Sequence[RouteChain], profile: StayProfile, speed: float = DEFAULT_SPEED) -> pd.DataFrame:
    """One row per consecutive stop pair: the error predicting the next arrival from the actual current one."""
    rows = []
    for chain in chains:
        for k in range(len(chain.stops) - 1):
            target = predict_arrival(chain, chain.stops[k].actual_arrival, profile, speed, start=k, stop=k + 1)[-1]
            rows.append(
                {
                    "trip_id": chain.trip_id,
                    "stay_id": target.stay_id,
                    "day": chain.local_date.isoformat(),
                    "band": assign_timezone(chain.stops[k + 1].actual_arrival, chain.utc_offset_min).value,
                    "error_min": target.error_min,
                    "misclassified": target.misclassified,
                }
            )
    return pd.DataFrame(rows, columns=["trip_id", "stay_id", "day", "band", "error_min", "misclassified"])


def quartiles(frame: pd.DataFrame, by: str, value: str) -> pd.DataFrame:
    """count, min, q1, median, q3, max of `value` per `by` group, sorted by group key."""
    grouped = frame.groupby(by, sort=True)[value]
    summary = pd.DataFrame(
        {
            "count": grouped.count(),
            "min": grouped.min(),
            "q1": grouped.quantile(0.25),
            "median": grouped.median(),
            "q3": grouped.quantile(0.75),
            "max": grouped.max(),
        }
    )
    return summary.reset_index().rename(columns={by: "group"})


def daywise_error(chains: Sequence[RouteChain], profile: StayProfile, speed: float = DEFAULT_SPEED) -> pd.DataFrame:
    """Next-stop error quartiles per local day and per time band, stacked with a `kind` column."""
    errors = next_stop_errors(chains, profile, speed)
    parts = [quartiles(errors, key, "error_min").assign(kind=key) for key in ("day", "band")]
    frame = pd.concat(parts, ignore_index=True)
    return frame[["kind", "group", "count", "min", "q1", "median", "q3", "max"]]
