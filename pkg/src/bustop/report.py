"""Pilot statistics per stay type: stay duration, WiFi density and ambient-noise SNR.

Each statistic is summarized by count, min, quartiles and max for every stay type that has
data. A confounded stay counts towards each of its types. SNR is computed from the trip
audio here only; it never enters the feature vector.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence

import pandas as pd
from loguru import logger

from .acoustics import MfccConfig, WindowTooShort, snr_db
from .eta import quartiles
from .features import FeatureRecord
from .models import StayLocation, StayType, TripTrace

STATISTICS = ("stay_duration_s", "wifi_density", "snr_db")
COLUMNS = ["statistic", "type", "count", "min", "q1", "median", "q3", "max"]


def stay_snr(trace: TripTrace, stays: Iterable[StayLocation], cfg: MfccConfig = MfccConfig()) -> dict[str, float]:
    """SNR (dB) of each stay's audio; stays too short for ten frames are skipped."""
    result = {}
    for stay in stays:
        try:
            result[stay.stay_id] = snr_db(trace.audio.window(stay.t_start, stay.t_end), cfg)
        except WindowTooShort as e:
            logger.debug(f"{stay.stay_id}: no SNR ({e})")
    return result


def pilot_statistics(
    records: Sequence[FeatureRecord], snr: Mapping[str, float] | None = None
) -> tuple[pd.DataFrame, list[str]]:
    """Quartile table over (statistic, type) and notes for every omitted combination."""
    snr = snr or {}
    long = []
    for record in records:
        for t in record.labels:
            long.append({"statistic": "stay_duration_s", "type": t.value, "value": float(record.vector.f1)})
            long.append({"statistic": "wifi_density", "type": t.value, "value": float(record.vector.f7)})
            if record.stay_id in snr:
                long.append({"statistic": "snr_db", "type": t.value, "value": snr[record.stay_id]})
    frame = pd.DataFrame(long, columns=["statistic", "type", "value"])
    parts, notes = [], []
    for statistic in STATISTICS:
        for t in StayType:
            values = frame[(frame["statistic"] == statistic) & (frame["type"] == t.value)]
            if values.empty:
                notes.append(f"{statistic}: no {t.value} stays, row omitted")
                continue
            summary = quartiles(values, "type", "value").rename(columns={"group": "type"})
            parts.append(summary.assign(statistic=statistic))
    table = pd.concat(parts, ignore_index=True)[COLUMNS] if parts else pd.DataFrame(columns=COLUMNS)
    for note in notes:
        logger.info(note)
    return table, notes
