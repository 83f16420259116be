"""Geometric primitives for distance and map-tile math.

Provides immutable types for working with the zoom-18 Web Mercator tile lattice used by
the offline map store:
- Tile: 256x256 pixel cells of the slippy-map lattice at a given zoom
- Point: global pixel coordinates at a given zoom
- Size: width and height dimensions
- Rectangle: axis-aligned pixel regions with tile enumeration
- LatLon: latitude/longitude with Web Mercator projection to/from global pixel space

Distances on the ground use the haversine formula on a sphere of radius 6,371,000 m.
Map boxes use the Web Mercator ground resolution 156543.03392·cos(lat)/2^zoom m/px.
"""

from __future__ import annotations

from math import asin, asinh, atan, cos, degrees, floor, pi, radians, sin, sinh, sqrt, tan
from typing import NamedTuple

EARTH_RADIUS_M = 6_371_000.0
TILE_SIZE = 256
EQUATOR_RESOLUTION = 156543.03392  # meters per pixel at zoom 0
DEFAULT_ZOOM = 18


class LatLon(NamedTuple):
    """Latitude/longitude in WGS-84 degrees with Web Mercator projection conversion."""

    lat: float
    lon: float

    @classmethod
    def from_pixel(cls, x: float, y: float, zoom: int = DEFAULT_ZOOM) -> LatLon:
        """Inverse Web Mercator projection from global pixel space at `zoom`."""
        world = TILE_SIZE * 2**zoom
        lon = x / world * 360 - 180
        lat = degrees(atan(sinh(pi * (1 - 2 * y / world))))
        return cls(lat, lon)

    def to_pixel(self, zoom: int = DEFAULT_ZOOM) -> tuple[float, float]:
        """Forward Web Mercator projection: geo coordinates to (fractional) global pixel coordinates."""
        world = TILE_SIZE * 2**zoom
        x = (self.lon + 180) / 360 * world
        y = (1 - asinh(tan(radians(self.lat))) / pi) / 2 * world
        return x, y


def haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between two (lat, lon) pairs."""
    lat1, lon1 = radians(a[0]), radians(a[1])
    lat2, lon2 = radians(b[0]), radians(b[1])
    h = sin((lat2 - lat1) / 2) ** 2 + cos(lat1) * cos(lat2) * sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * asin(min(1.0, sqrt(h)))


def ground_resolution(lat: float, zoom: int = DEFAULT_ZOOM) -> float:
    """Meters per pixel at latitude `lat` and `zoom`."""
    return EQUATOR_RESOLUTION * cos(radians(lat)) / 2**zoom


def meters_to_degrees_lat(meters: float) -> float:
    """Latitude offset covering `meters` along a meridian of the reference sphere."""
    return degrees(meters / EARTH_RADIUS_M)


class Tile(NamedTuple):
    """A tile in the slippy-map lattice, each containing 256x256 pixels."""

    x: int = 0
    y: int = 0

    def __str__(self) -> str:
        return f"{self.x}_{self.y}"

    def to_point(self, px: int = 0, py: int = 0) -> Point:
        """Convert to a global Point given pixel coordinates within the tile."""
        return Point(self.x * TILE_SIZE + px, self.y * TILE_SIZE + py)


class Point(NamedTuple):
    """A pixel in global pixel space. Tile information is implicit (every 256 pixels is a tile)."""

    x: int = 0
    y: int = 0

    def __sub__(self, other: Point) -> Point:  # type: ignore[override]
        return Point(self.x - other.x, self.y - other.y)


class Size(NamedTuple):
    """A pixel size."""

    w: int = 0
    h: int = 0


class Rectangle(NamedTuple):
    """A pixel rectangle in global pixel space. Uses PIL-style coordinates (right/bottom exclusive)."""

    left: int
    top: int
    right: int
    bottom: int

    @property
    def point(self) -> Point:
        """Top-left point of the rectangle."""
        return Point(min(self.left, self.right), min(self.top, self.bottom))

    @property
    def size(self) -> Size:
        return Size(abs(self.right - self.left), abs(self.bottom - self.top))

    @classmethod
    def around(cls, center: LatLon, m: float, n: float, zoom: int = DEFAULT_ZOOM) -> Rectangle:
        """Axis-aligned box of m (east-west) by n (north-south) meters centered on `center`.

        Pixel extents use the ground resolution at the center latitude. The box is anchored on
        the pixel containing the center, so any two centers inside one pixel share a box.
        """
        resolution = ground_resolution(center.lat, zoom)
        w = max(1, round(m / resolution))
        h = max(1, round(n / resolution))
        cx, cy = center.to_pixel(zoom)
        left = floor(cx) - w // 2
        top = floor(cy) - h // 2
        return cls(left, top, left + w, top + h)

    @property
    def tiles(self) -> frozenset[Tile]:
        """Set of tiles covered by this rectangle."""
        left = self.left // TILE_SIZE
        top = self.top // TILE_SIZE
        right = (self.right + TILE_SIZE - 1) // TILE_SIZE
        bottom = (self.bottom + TILE_SIZE - 1) // TILE_SIZE
        return frozenset(Tile(tx, ty) for tx in range(left, right) for ty in range(top, bottom))
