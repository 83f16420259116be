import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bustop.geometry import (
    TILE_SIZE,
    LatLon,
    Point,
    Rectangle,
    Size,
    Tile,
    ground_resolution,
    haversine,
    meters_to_degrees_lat,
)


def test_tile_str_and_to_point():
    t = Tile(2, 3)
    assert str(t) == "2_3"
    assert t.to_point(10, 20) == Point(2 * TILE_SIZE + 10, 3 * TILE_SIZE + 20)


def test_point_subtraction():
    assert Point(1500, 2500) - Point(500, 1000) == Point(1000, 1500)


def test_rectangle_tiles():
    rect = Rectangle(200, 200, 500, 800)
    # x spans tiles 0..1, y spans tiles 0..3
    tiles = rect.tiles
    assert Tile(0, 0) in tiles
    assert Tile(1, 3) in tiles
    assert len(tiles) == 8


def test_rectangle_point_and_size():
    r = Rectangle(10, 20, 110, 220)
    assert r.point == Point(10, 20)
    assert r.size == Size(100, 200)


lats = st.floats(min_value=-89.0, max_value=89.0)
lons = st.floats(min_value=-180.0, max_value=180.0)


@given(a=st.tuples(lats, lons), b=st.tuples(lats, lons))
def test_haversine_zero_and_symmetric(a, b):
    assert haversine(a, a) == 0.0
    assert haversine(a, b) == haversine(b, a)


def test_haversine_along_meridian_matches_degree_offset():
    """A latitude offset of meters_to_degrees_lat(d) is d meters on the reference sphere."""
    a = LatLon(23.52, 87.31)
    b = LatLon(a.lat + meters_to_degrees_lat(340.0), a.lon)
    assert haversine(a, b) == pytest.approx(340.0, abs=1e-6)


def test_haversine_quarter_circumference():
    assert haversine((0.0, 0.0), (0.0, 90.0)) == pytest.approx(math.pi / 2 * 6_371_000, rel=1e-12)


def test_haversine_triangle_inequality():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        lat = rng.uniform(-80, 80, size=3)
        lon = rng.uniform(-179, 179, size=3)
        a, b, c = zip(lat, lon)
        assert haversine(a, c) <= haversine(a, b) + haversine(b, c) + 1e-6


def test_pixel_projection_round_trip():
    p = LatLon(23.52, 87.31)
    x, y = p.to_pixel(18)
    q = LatLon.from_pixel(x, y, 18)
    assert q.lat == pytest.approx(p.lat, abs=1e-9)
    assert q.lon == pytest.approx(p.lon, abs=1e-9)


def test_ground_resolution_at_equator():
    assert ground_resolution(0.0, 0) == pytest.approx(156543.03392)
    assert ground_resolution(0.0, 18) == pytest.approx(156543.03392 / 2**18)


class TestAround:
    def test_box_size_in_pixels(self):
        center = LatLon(23.52, 87.31)
        rect = Rectangle.around(center, 300, 300, 18)
        expected = round(300 / ground_resolution(center.lat, 18))
        assert rect.size == Size(expected, expected)

    def test_box_contains_center_pixel(self):
        center = LatLon(23.52, 87.31)
        rect = Rectangle.around(center, 300, 150, 18)
        cx, cy = center.to_pixel(18)
        assert rect.left <= cx < rect.right
        assert rect.top <= cy < rect.bottom

    def test_centers_in_one_pixel_share_a_box(self):
        x, y = LatLon(23.52, 87.31).to_pixel(18)
        a = LatLon.from_pixel(math.floor(x) + 0.1, math.floor(y) + 0.1, 18)
        b = LatLon.from_pixel(math.floor(x) + 0.9, math.floor(y) + 0.9, 18)
        assert Rectangle.around(a, 300, 300) == Rectangle.around(b, 300, 300)

    def test_tiny_box_is_at_least_one_pixel(self):
        rect = Rectangle.around(LatLon(0.0, 0.0), 0.01, 0.01)
        assert rect.size == Size(1, 1)
