"""Spatial encoding of stay surroundings from an offline store of rendered map tiles.

Tiles are zoom-18 Web Mercator rasters stored as binary PPM files under
`<root>/<zoom>/<x>_<y>.ppm`, with the color legend in `<root>/legend.json`:

    {"colors": [{"rgb": [r, g, b], "class": "Road"}, ...]}

For a stay centroid, the covering tiles are stitched into one composite cropped exactly to
the m×n meter box around it, and every pixel is classified by exact RGB lookup. Colors
absent from the legend count as Other. The class fractions give f10-f12 (percent
residential, natural and road) and f13 (any special-landmark pixel present).

The Legend class plays the role of a palette: exact color matching via binary search over
sorted packed RGB integers, done for the whole raster at once with numpy.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from loguru import logger
from PIL import Image

from .geometry import DEFAULT_ZOOM, TILE_SIZE, LatLon, Rectangle, Tile, ground_resolution
from .models import BustopError

BOX_METERS = 300.0


class LandmarkClass(StrEnum):
    RESIDENTIAL = "Residential"
    NATURAL = "Natural"
    ROAD = "Road"
    SPECIAL_LANDMARK = "SpecialLandmark"
    OTHER = "Other"


_CLASSES = tuple(LandmarkClass)
_OTHER = _CLASSES.index(LandmarkClass.OTHER)


class MissingTile(BustopError):
    def __init__(self, x: int, y: int, zoom: int) -> None:
        self.tile = Tile(x, y)
        self.zoom = zoom
        super().__init__(f"tile {x}_{y} at zoom {zoom} is not in the store")


class CorruptTile(BustopError):
    def __init__(self, path: Path, reason: str) -> None:
        super().__init__(f"{path}: unreadable tile: {reason}")


class LegendError(BustopError):
    """Raised when legend.json is malformed or ambiguous."""


def pack_rgb(rgb: np.ndarray) -> np.ndarray:
    """Pack (..., 3) uint8 RGB into (...) int64 0xRRGGBB."""
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


class Legend:
    """Exact-color mapping from RGB to LandmarkClass."""

    def __init__(self, colors: dict[tuple[int, int, int], LandmarkClass]):
        missing = set(_CLASSES) - set(colors.values())
        if missing:
            raise LegendError(f"legend has no color for {', '.join(sorted(missing))}")
        packed = {(r << 16) | (g << 8) | b: _CLASSES.index(cls) for (r, g, b), cls in colors.items()}
        self.colors = dict(colors)
        self._idx = np.array(sorted(packed), dtype=np.int64)
        self._values = np.array([packed[c] for c in self._idx], dtype=np.int64)

    def classify(self, pixels: np.ndarray) -> np.ndarray:
        """Class index per pixel for an (..., 3) RGB array; unknown colors map to Other."""
        rgb = pack_rgb(pixels).ravel()
        position = np.searchsorted(self._idx, rgb)
        clipped = np.minimum(position, len(self._idx) - 1)
        matched = (position < len(self._idx)) & (self._idx[clipped] == rgb)
        return np.where(matched, self._values[clipped], _OTHER)

    @classmethod
    def load(cls, path: Path | str) -> Legend:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            entries = payload["colors"]
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise LegendError(f"cannot read legend {path}: {e}") from e
        colors: dict[tuple[int, int, int], LandmarkClass] = {}
        for entry in entries:
            try:
                r, g, b = (int(v) for v in entry["rgb"])
                landmark = LandmarkClass(entry["class"])
            except (KeyError, TypeError, ValueError) as e:
                raise LegendError(f"bad legend entry {entry!r}: {e}") from e
            if not all(0 <= v <= 255 for v in (r, g, b)):
                raise LegendError(f"legend color {entry['rgb']} out of range")
            if colors.get((r, g, b), landmark) is not landmark:
                raise LegendError(f"legend color #{r:02x}{g:02x}{b:02x} maps to two classes")
            colors[(r, g, b)] = landmark
        return cls(colors)

    def save(self, path: Path | str) -> None:
        entries = [{"rgb": list(rgb), "class": cls.value} for rgb, cls in sorted(self.colors.items())]
        Path(path).write_text(json.dumps({"colors": entries}, indent=1), encoding="utf-8")


@dataclass
class TileStore:
    """Read-only view over a directory of rendered tiles. Tiles are decoded lazily and cached."""

    root: Path
    legend: Legend
    zoom: int = DEFAULT_ZOOM
    _cache: dict[Tile, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: Path | str, zoom: int = DEFAULT_ZOOM) -> TileStore:
        root = Path(root)
        return cls(root=root, legend=Legend.load(root / "legend.json"), zoom=zoom)

    def tile_path(self, tile: Tile) -> Path:
        return self.root / str(self.zoom) / f"{tile}.ppm"

    def has(self, tile: Tile) -> bool:
        return tile in self._cache or self.tile_path(tile).exists()

    def load(self, tile: Tile) -> np.ndarray:
        """(256, 256, 3) uint8 pixels of `tile`."""
        if (pixels := self._cache.get(tile)) is not None:
            return pixels
        path = self.tile_path(tile)
        if not path.exists():
            raise MissingTile(tile.x, tile.y, self.zoom)
        try:
            with Image.open(path) as image:
                pixels = np.asarray(image.convert("RGB"))
        except OSError as e:
            raise CorruptTile(path, str(e)) from e
        if pixels.shape != (TILE_SIZE, TILE_SIZE, 3):
            raise CorruptTile(path, f"size {pixels.shape[1]}x{pixels.shape[0]}, expected {TILE_SIZE}x{TILE_SIZE}")
        pixels.setflags(write=False)
        self._cache[tile] = pixels
        return pixels

    def missing(self, rect: Rectangle) -> list[Tile]:
        return sorted(tile for tile in rect.tiles if not self.has(tile))


def write_tile(root: Path | str, zoom: int, tile: Tile, pixels: np.ndarray) -> Path:
    """Save (256, 256, 3) uint8 pixels as `<root>/<zoom>/<x>_<y>.ppm`."""
    path = Path(root) / str(zoom) / f"{tile}.ppm"
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(path, format="PPM")
    return path


@dataclass(frozen=True)
class CompositeRaster:
    pixels: np.ndarray  # (height, width, 3) uint8, row-major
    meters_per_pixel: float

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def stitch_tiles(store: TileStore, center: LatLon, m: float = BOX_METERS, n: float = BOX_METERS) -> CompositeRaster:
    """Stitch tiles from the store together, exactly covering the m×n meter box around `center`."""
    rect = Rectangle.around(center, m, n, store.zoom)
    image = Image.new("RGB", rect.size)
    for tile in sorted(rect.tiles):
        pixels = store.load(tile)
        offset = tile.to_point() - rect.point
        image.paste(Image.fromarray(pixels, "RGB"), (offset.x, offset.y))
    return CompositeRaster(np.asarray(image), ground_resolution(center.lat, store.zoom))


def classify_pixels(raster: CompositeRaster, legend: Legend) -> dict[LandmarkClass, float]:
    """Fraction of pixels per landmark class; fractions sum to 1."""
    counts = np.bincount(legend.classify(raster.pixels), minlength=len(_CLASSES))
    total = counts.sum()
    return {cls: float(counts[i] / total) for i, cls in enumerate(_CLASSES)}


class SpatialFeatures(NamedTuple):
    residential_pct: float
    natural_pct: float
    road_pct: float
    highly_populated: int


def spatial_features(
    store: TileStore, centroid: LatLon, m: float = BOX_METERS, n: float = BOX_METERS
) -> SpatialFeatures:
    """f10-f13 for the box around `centroid`."""
    fractions = classify_pixels(stitch_tiles(store, centroid, m, n), store.legend)
    return SpatialFeatures(
        residential_pct=100 * fractions[LandmarkClass.RESIDENTIAL],
        natural_pct=100 * fractions[LandmarkClass.NATURAL],
        road_pct=100 * fractions[LandmarkClass.ROAD],
        highly_populated=int(fractions[LandmarkClass.SPECIAL_LANDMARK] > 0),
    )


def check_coverage(
    store: TileStore, centroids: Iterable[LatLon], m: float = BOX_METERS, n: float = BOX_METERS
) -> list[Tile]:
    """Tiles needed by any centroid's box that the store lacks, sorted and deduplicated."""
    missing: set[Tile] = set()
    for centroid in centroids:
        missing.update(store.missing(Rectangle.around(centroid, m, n, store.zoom)))
    if missing:
        logger.warning(f"{len(missing)} tiles missing from {store.root}")
    return sorted(missing)
