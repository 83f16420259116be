"""Seeded synthetic bus trips with exact ground truth.

A route runs due north from an origin. Sites (places where the bus stays) sit along it
with spacings that are whole multiples of 17 m, so at the cruise speed of 17 m/s every edge
takes a whole number of seconds. Each site has a fixed type set and a class signature:

- stay duration per time band
- audio loudness and tone mix
- WiFi access-point pools at the site and on the approaching edge
- road roughness on the approach
- the map-class mix painted into its 300 m box

Signatures are separable by construction, so classifier thresholds exercise the pipeline,
not the generator's realism. Every trip visits every site. In exact mode durations equal
their band means and the bus moves at exactly 17 m/s, which makes the ETA model exact.
Otherwise durations get a 20% standard deviation and edge speeds ±10% jitter.

All randomness comes from numpy's PCG64 streams seeded by SeedSequence(seed, spawn_key),
route first and then one key per trip. Sensor values are rounded explicitly, and sines are
read from an integer table at 1e-6 cycle resolution, so bundles are reproducible.
"""

from __future__ import annotations

import datetime as dt
import functools
import json
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import humanize
import numpy as np
from loguru import logger

from .geometry import DEFAULT_ZOOM, TILE_SIZE, LatLon, Rectangle, Tile, meters_to_degrees_lat
from .mapenc import BOX_METERS, LandmarkClass, Legend, TileStore, write_tile
from .models import (
    SAMPLE_RATE,
    AudioStream,
    Direction,
    GeoPoint,
    GroundTruthMark,
    StayType,
    TimeBand,
    TripTrace,
    WifiScan,
)
from .staypoint import assign_timezone
from .trace import write_trip

CRUISE_SPEED = 17
IMU_RATE = 197
SCAN_INTERVAL_MS = 3000
GRAVITY = 9.81
LEAD_IN_STEPS = 10  # 170 m of cruising before the first site and after the last
SPACING_STEPS = (19, 25)  # site spacing in 17 m steps, high exclusive
MIN_DURATION_S = 3
PHASE_STEPS = 1_000_000
SINE_SCALE = 32767
ENGINE_NOISE = 300
IDLE_ROUGHNESS = 0.05
LANDMARK_BLOCK_PX = 4

BAND_START_HOUR = {
    TimeBand.EARLY_MORNING: 6,
    TimeBand.MORNING: 9,
    TimeBand.AFTERNOON: 13,
    TimeBand.EVENING: 17,
}
BAND_FACTOR = {
    TimeBand.EARLY_MORNING: 0.8,
    TimeBand.MORNING: 1.2,
    TimeBand.AFTERNOON: 1.0,
    TimeBand.EVENING: 1.4,
}

LEGEND_COLORS = {
    LandmarkClass.RESIDENTIAL: (232, 221, 203),
    LandmarkClass.NATURAL: (197, 232, 176),
    LandmarkClass.ROAD: (255, 255, 255),
    LandmarkClass.SPECIAL_LANDMARK: (214, 69, 65),
    LandmarkClass.OTHER: (241, 243, 244),
}
LEGEND = Legend({rgb: cls for cls, rgb in LEGEND_COLORS.items()})
MIX_CLASSES = (LandmarkClass.RESIDENTIAL, LandmarkClass.NATURAL, LandmarkClass.ROAD, LandmarkClass.OTHER)


@functools.cache
def sine_table() -> np.ndarray:
    """sin(2π·i/1e6) scaled to ±32767 and rounded, for i in [0, 1e6)."""
    table = np.round(np.sin(2 * np.pi * np.arange(PHASE_STEPS) / PHASE_STEPS) * SINE_SCALE).astype(np.int64)
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class TypeSignature:
    mean_duration_s: int  # afternoon mean; other bands scale by BAND_FACTOR
    audio_amp: int
    tones_hz: tuple[int, ...]
    wifi_stay: int  # AP pool at the site
    wifi_edge: int  # AP pool along the approaching edge
    roughness: float  # RMS vertical acceleration on the approach, m/s²
    class_mix: tuple[int, int, int, int]  # column percentages over MIX_CLASSES, summing to 100
    landmark: bool

    def __post_init__(self):
        assert sum(self.class_mix) == 100, "class mix must cover the box"
        assert self.mean_duration_s >= MIN_DURATION_S and self.audio_amp >= 0

    def band_mean(self, band: TimeBand) -> int:
        return max(MIN_DURATION_S, round(self.mean_duration_s * BAND_FACTOR[band]))


SIGNATURES: dict[StayType, TypeSignature] = {
    StayType.BUS_STOP: TypeSignature(20, 2500, (300, 1200), 14, 12, 0.8, (50, 10, 30, 10), True),
    StayType.SIGNAL: TypeSignature(35, 1500, (500, 2000), 10, 18, 1.5, (30, 5, 55, 10), True),
    StayType.CONGESTION: TypeSignature(55, 6000, (250, 800, 1600), 5, 8, 2.4, (60, 0, 35, 5), True),
    StayType.TURN: TypeSignature(6, 800, (700,), 2, 4, 3.4, (10, 40, 40, 10), False),
    StayType.AD_HOC: TypeSignature(12, 400, (1000, 3000), 1, 2, 0.3, (5, 70, 15, 10), False),
}


def signature_for(types: frozenset[StayType], signatures: Mapping[StayType, TypeSignature]) -> TypeSignature:
    """A confounded site looks like its first type but waits for its longest one."""
    ordered = [t for t in StayType if t in types]
    base = signatures[ordered[0]]
    longest = max(signatures[t].mean_duration_s for t in ordered)
    return replace(base, mean_duration_s=longest)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    stays_per_type: int = 20
    type_counts: Mapping[StayType, int] = field(default_factory=dict)  # overrides stays_per_type
    sites_per_type: int = 5
    confounded_sites: int = 0  # BusStop|Signal sites
    exact: bool = False
    duration_sd: float = 0.2  # fraction of the mean
    speed_jitter: float = 0.1  # ± fraction of cruise speed
    origin: LatLon = LatLon(23.52, 87.31)
    utc_offset_min: int = 330
    zoom: int = DEFAULT_ZOOM
    start_date: dt.date = dt.date(2024, 3, 4)
    signatures: Mapping[StayType, TypeSignature] = field(default_factory=lambda: dict(SIGNATURES))

    def __post_init__(self):
        assert self.stays_per_type >= 0 and self.sites_per_type >= 1 and self.confounded_sites >= 0
        assert all(n >= 0 for n in self.type_counts.values()), "counts must be non-negative"
        assert self.duration_sd >= 0 and 0 <= self.speed_jitter < 1

    def count(self, stay_type: StayType) -> int:
        return self.type_counts.get(stay_type, self.stays_per_type)

    @property
    def n_trips(self) -> int:
        wanted = max((self.count(t) for t in StayType), default=0)
        return math.ceil(wanted / self.sites_per_type) if wanted else (1 if self.confounded_sites else 0)

    def n_sites(self, stay_type: StayType) -> int:
        """Sites of one type; every trip visits each, so stays = sites × trips ≥ count."""
        return math.ceil(self.count(stay_type) / self.n_trips) if self.count(stay_type) else 0


class Site(NamedTuple):
    site_id: int
    position: LatLon
    odometer_m: float
    types: frozenset[StayType]


@dataclass(frozen=True)
class Route:
    sites: tuple[Site, ...]
    end_m: float
    tiles: dict[Tile, np.ndarray]
    legend: Legend
    zoom: int

    def tile_store(self, root: Path | str = "<memory>") -> TileStore:
        """A store serving this route's rendered tiles without touching the filesystem."""
        return TileStore(Path(root), self.legend, self.zoom, dict(self.tiles))


def along(origin: LatLon, meters: float) -> LatLon:
    return LatLon(round(origin.lat + meters_to_degrees_lat(meters), 9), origin.lon)


def _paint(tiles: dict[Tile, np.ndarray], rect: Rectangle, colors: np.ndarray) -> None:
    """Write `colors` (h, w, 3) over the global pixel rectangle `rect` across tiles."""
    for tile in rect.tiles:
        ox, oy = tile.x * TILE_SIZE, tile.y * TILE_SIZE
        x0, x1 = max(rect.left, ox), min(rect.right, ox + TILE_SIZE)
        y0, y1 = max(rect.top, oy), min(rect.bottom, oy + TILE_SIZE)
        if x0 < x1 and y0 < y1:
            source = colors[y0 - rect.top : y1 - rect.top, x0 - rect.left : x1 - rect.left]
            tiles[tile][y0 - oy : y1 - oy, x0 - ox : x1 - ox] = source


def render_tiles(
    sites: tuple[Site, ...], signatures: Mapping[StayType, TypeSignature], zoom: int = DEFAULT_ZOOM
) -> dict[Tile, np.ndarray]:
    """Tiles covering every site box: background Other, each box striped by its class mix."""
    background = np.array(LEGEND_COLORS[LandmarkClass.OTHER], dtype=np.uint8)
    tiles: dict[Tile, np.ndarray] = {}
    for site in sites:
        rect = Rectangle.around(site.position, BOX_METERS, BOX_METERS, zoom)
        for tile in rect.tiles:
            tiles.setdefault(tile, np.tile(background, (TILE_SIZE, TILE_SIZE, 1)))
        sig = signature_for(site.types, signatures)
        w, h = rect.size
        bounds = np.cumsum(sig.class_mix)
        column_class = np.searchsorted(bounds, (np.arange(w) + 0.5) * 100 / w)
        palette = np.array([LEGEND_COLORS[cls] for cls in MIX_CLASSES], dtype=np.uint8)
        box = np.broadcast_to(palette[column_class], (h, w, 3)).copy()
        if sig.landmark:
            x, y = w // 2 - LANDMARK_BLOCK_PX // 2, LANDMARK_BLOCK_PX
            box[y : y + LANDMARK_BLOCK_PX, x : x + LANDMARK_BLOCK_PX] = LEGEND_COLORS[LandmarkClass.SPECIAL_LANDMARK]
        _paint(tiles, rect, box)
    return tiles


def gen_route(cfg: SynthConfig) -> Route:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    kinds = [frozenset({t}) for t in StayType for _ in range(cfg.n_sites(t))]
    kinds += [frozenset({StayType.BUS_STOP, StayType.SIGNAL})] * cfg.confounded_sites
    sites = []
    meters = float(LEAD_IN_STEPS * CRUISE_SPEED)
    for i, k in enumerate(rng.permutation(len(kinds))):
        if i:
            meters += CRUISE_SPEED * int(rng.integers(*SPACING_STEPS))
        sites.append(Site(i, along(cfg.origin, meters), meters, kinds[k]))
    end_m = meters + LEAD_IN_STEPS * CRUISE_SPEED
    tiles = render_tiles(tuple(sites), cfg.signatures, cfg.zoom)
    logger.debug(f"Route of {len(sites)} sites over {end_m / 1000:.2f} km, {len(tiles)} tiles")
    return Route(tuple(sites), end_m, tiles, LEGEND, cfg.zoom)


class ManifestStay(NamedTuple):
    site_id: int
    types: frozenset[StayType]
    t_start: int
    t_end: int
    duration_s: int
    band: TimeBand
    position: LatLon


class SynthTrip(NamedTuple):
    trace: TripTrace
    stays: tuple[ManifestStay, ...]


class _Segment(NamedTuple):
    t_from: int
    t_to: int
    site: Site | None
    at_stay: bool


def trip_start(cfg: SynthConfig, index: int) -> tuple[int, TimeBand]:
    """Epoch ms of trip `index`: bands cycle per trip, one day per four trips, an hour into the band."""
    band = tuple(TimeBand)[index % 4]
    day = cfg.start_date + dt.timedelta(days=index // 4)
    midnight = int(dt.datetime(day.year, day.month, day.day, tzinfo=dt.UTC).timestamp())
    seconds = midnight + (BAND_START_HOUR[band] + 1) * 3600 - cfg.utc_offset_min * 60
    return seconds * 1000, band


def _rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, 0.6)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def _bssid(site_id: int, kind: int, j: int) -> str:
    return f"02:{site_id >> 8:02x}:{site_id & 0xFF:02x}:{kind:02x}:00:{j:02x}"


def gen_trip(route: Route, cfg: SynthConfig, index: int) -> SynthTrip:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, index)))
    t0, _ = trip_start(cfg, index)
    gps: list[GeoPoint] = []
    segments: list[_Segment] = []
    stays: list[ManifestStay] = []
    marks: list[GroundTruthMark] = []
    t, meters = t0, 0.0

    def cruise(target_m: float, site: Site | None, final: bool = False) -> None:
        nonlocal t, meters
        distance = target_m - meters
        speed = CRUISE_SPEED if cfg.exact else CRUISE_SPEED * (1 + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter))
        steps = max(1, round(distance / speed))
        reported = round(distance / steps, 3)
        for s in range(steps + int(final)):
            p = along(cfg.origin, meters + s * distance / steps)
            gps.append(GeoPoint(p.lat, p.lon, t + s * 1000, reported))
        segments.append(_Segment(t, t + steps * 1000, site, False))
        t += steps * 1000
        meters = target_m

    for site in route.sites:
        cruise(site.odometer_m, site)
        sig = signature_for(site.types, cfg.signatures)
        band = assign_timezone(t, cfg.utc_offset_min)
        mean = sig.band_mean(band)
        duration = mean if cfg.exact else max(MIN_DURATION_S, round(rng.normal(mean, cfg.duration_sd * mean)))
        for s in range(duration):
            gps.append(GeoPoint(site.position.lat, site.position.lon, t + s * 1000, 0.0))
        segments.append(_Segment(t, t + duration * 1000, site, True))
        t_end = t + (duration - 1) * 1000
        stays.append(ManifestStay(site.site_id, site.types, t, t_end, duration, band, site.position))
        marks.append(GroundTruthMark(t + (duration // 2) * 1000, site.types))
        t += duration * 1000
    cruise(route.end_m, None, final=True)
    t_last = gps[-1].t

    starts = np.array([s.t_from for s in segments], dtype=np.int64)
    trace = TripTrace(
        trip_id=f"trip-{index:03d}",
        direction=Direction.UP,
        gps=tuple(gps),
        imu=_imu(rng, cfg, t0, t_last, segments, starts),
        audio=_audio(rng, cfg, t0, t_last, segments),
        wifi=_wifi(rng, cfg, t0, t_last, segments, starts),
        marks=tuple(marks),
        utc_offset_min=cfg.utc_offset_min,
    )
    return SynthTrip(trace, tuple(stays))


def _imu(
    rng: np.random.Generator, cfg: SynthConfig, t0: int, t_last: int, segments: list[_Segment], starts: np.ndarray
) -> np.ndarray:
    """197 Hz accelerometer: gravity plus vertical roughness, seen through a fixed device rotation."""
    n = (t_last - t0) * IMU_RATE // 1000 + 1
    i = np.arange(n, dtype=np.int64)
    times = t0 + (2 * i * 1000 + IMU_RATE) // (2 * IMU_RATE)
    amplitude = np.array(
        [
            IDLE_ROUGHNESS if s.at_stay or s.site is None else signature_for(s.site.types, cfg.signatures).roughness
            for s in segments
        ]
    )
    per_sample = amplitude[np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(segments) - 1)]
    vertical = GRAVITY + per_sample * rng.uniform(-math.sqrt(3), math.sqrt(3), size=n)
    device_up = _rotation(rng)[:, 2]
    imu = np.empty((n, 4))
    imu[:, 0] = times
    imu[:, 1:] = np.round(vertical[:, None] * device_up[None, :], 5)
    return imu


def _audio(rng: np.random.Generator, cfg: SynthConfig, t0: int, t_last: int, segments: list[_Segment]) -> AudioStream:
    """8 kHz PCM: tones plus noise at stays, engine noise while moving."""
    per_ms = SAMPLE_RATE // 1000
    samples = np.zeros((t_last - t0 + 1000) * per_ms, dtype=np.int64)
    table = sine_table()
    for seg in segments:
        lo, hi = (seg.t_from - t0) * per_ms, min(len(samples), (seg.t_to - t0) * per_ms)
        if not seg.at_stay or seg.site is None:
            samples[lo:hi] = rng.integers(-ENGINE_NOISE, ENGINE_NOISE + 1, size=hi - lo)
            continue
        sig = signature_for(seg.site.types, cfg.signatures)
        n = np.arange(lo, hi, dtype=np.int64)
        tone_amp = sig.audio_amp // len(sig.tones_hz)
        for f in sig.tones_hz:
            samples[lo:hi] += tone_amp * table[(f * n * (PHASE_STEPS // SAMPLE_RATE)) % PHASE_STEPS] // SINE_SCALE
        noise = max(1, sig.audio_amp // 5)
        samples[lo:hi] += rng.integers(-noise, noise + 1, size=hi - lo)
    tail = (segments[-1].t_to - t0) * per_ms
    samples[tail:] = rng.integers(-ENGINE_NOISE, ENGINE_NOISE + 1, size=max(0, len(samples) - tail))
    return AudioStream(np.clip(samples, -32768, 32767).astype(np.int16), t0, SAMPLE_RATE)


def _wifi(
    rng: np.random.Generator, cfg: SynthConfig, t0: int, t_last: int, segments: list[_Segment], starts: np.ndarray
) -> tuple[WifiScan, ...]:
    """A scan every 3 s: the site pool while stopped (p=0.8 each), the edge pool on the approach (p=0.5)."""
    scans = []
    for t in range(t0, t_last + 1, SCAN_INTERVAL_MS):
        seg = segments[min(int(np.searchsorted(starts, t, side="right")) - 1, len(segments) - 1)]
        if seg.site is None:
            continue
        sig = signature_for(seg.site.types, cfg.signatures)
        pool, kind, p = (sig.wifi_stay, 0, 0.8) if seg.at_stay else (sig.wifi_edge, 1, 0.5)
        seen = frozenset(_bssid(seg.site.site_id, kind, j) for j in range(pool) if rng.random() < p)
        if seen:
            scans.append(WifiScan(t, seen))
    return tuple(scans)


def iter_trips(route: Route, cfg: SynthConfig) -> Iterator[SynthTrip]:
    for index in range(cfg.n_trips):
        yield gen_trip(route, cfg, index)


def manifest_json(cfg: SynthConfig, route: Route, trips: list[tuple[str, TimeBand, tuple[ManifestStay, ...]]]) -> dict:
    return {
        "seed": cfg.seed,
        "exact": cfg.exact,
        "zoom": route.zoom,
        "sites": [
            {
                "site_id": s.site_id,
                "lat": s.position.lat,
                "lon": s.position.lon,
                "odometer_m": s.odometer_m,
                "types": StayType.format_set(s.types),
            }
            for s in route.sites
        ],
        "trips": [
            {
                "trip_id": trip_id,
                "start_band": band.value,
                "stays": [
                    {
                        "site_id": s.site_id,
                        "t_start": s.t_start,
                        "t_end": s.t_end,
                        "duration_s": s.duration_s,
                        "band": s.band.value,
                        "types": StayType.format_set(s.types),
                    }
                    for s in stays
                ],
            }
            for trip_id, band, stays in trips
        ],
    }


def write_bundle(cfg: SynthConfig, out: Path | str) -> Path:
    """Write trips/<trip_id>/, tiles/<zoom>/*.ppm, tiles/legend.json and manifest.json under `out`."""
    out = Path(out)
    route = gen_route(cfg)
    tiles_dir = out / "tiles"
    for tile, pixels in sorted(route.tiles.items()):
        write_tile(tiles_dir, route.zoom, tile, pixels)
    route.legend.save(tiles_dir / "legend.json")
    written = []
    audio_bytes = 0
    for index, trip in enumerate(iter_trips(route, cfg)):
        write_trip(trip.trace, out / "trips" / trip.trace.trip_id)
        written.append((trip.trace.trip_id, trip_start(cfg, index)[1], trip.stays))
        audio_bytes += trip.trace.audio.samples.nbytes
    (out / "manifest.json").write_text(json.dumps(manifest_json(cfg, route, written), indent=1), encoding="utf-8")
    stays = sum(len(s) for _, _, s in written)
    logger.info(
        f"Synthesized {len(written)} trips with {stays} stays and {len(route.tiles)} tiles "
        f"({humanize.naturalsize(audio_bytes)} of audio) in {out}"
    )
    return out
