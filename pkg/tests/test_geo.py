import math

import numpy as np
import pandas as pd
import pytest

from app.core.errors import EmptyInputError, InputError, InvalidCoordinateError
from app.schemas.geo import Band, ProjectedPoint, ProjectionParams
from app.services.geo_service import geo_service, tile_id_for
from tests.conftest import deposit_rows

TILE = 6720.0
RADIUS = 40_000.0


def brute_force_tiles(x: float, y: float, tile: float = TILE, radius: float = RADIUS):
    reach = int(radius // tile) + 2
    cx0, cy0 = int(math.floor(x / tile)), int(math.floor(y / tile))
    found = set()
    for ix in range(cx0 - reach, cx0 + reach + 1):
        for iy in range(cy0 - reach, cy0 + reach + 1):
            if math.hypot((ix + 0.5) * tile - x, (iy + 0.5) * tile - y) <= radius:
                found.add(tile_id_for(ix, iy))
    return found


class TestProjection:
    def test_origin_maps_to_zero(self):
        p = geo_service.project(0.0, 15.0)
        assert p.x_m == pytest.approx(0.0, abs=1e-9)
        assert p.y_m == pytest.approx(0.0, abs=1e-9)

    def test_one_degree_north_on_central_meridian(self):
        p = geo_service.project(1.0, 15.0)
        assert p.x_m == pytest.approx(0.0, abs=1e-9)
        assert p.y_m == pytest.approx(6_371_007.181 * math.pi / 180.0, rel=1e-12)

    def test_east_distance_shrinks_with_latitude(self):
        equator = geo_service.project(0.0, 16.0).x_m
        north = geo_service.project(60.0, 16.0).x_m
        assert north == pytest.approx(equator * 0.5, rel=1e-12)

    def test_inverse_round_trip(self):
        params = ProjectionParams(central_meridian_deg=20.0)
        point = geo_service.project(-23.5, 31.25, params)
        lat, lon = geo_service.inverse(point, params)
        assert lat == pytest.approx(-23.5, abs=1e-10)
        assert lon == pytest.approx(31.25, abs=1e-10)

    @pytest.mark.parametrize("lat,lon", [(91.0, 0.0), (0.0, 181.0), (float("nan"), 0.0), (0.0, float("inf"))])
    def test_invalid_coordinates_rejected(self, lat, lon):
        with pytest.raises(InvalidCoordinateError):
            geo_service.project(lat, lon)

    def test_project_many_matches_scalar(self):
        lats = np.array([-10.0, 0.0, 45.0])
        lons = np.array([10.0, 15.0, 40.0])
        xs, ys = geo_service.project_many(lats, lons)
        for lat, lon, x, y in zip(lats, lons, xs, ys):
            p = geo_service.project(lat, lon)
            assert x == pytest.approx(p.x_m)
            assert y == pytest.approx(p.y_m)

    def test_distance(self):
        assert geo_service.distance(ProjectedPoint(x_m=0, y_m=0), ProjectedPoint(x_m=3, y_m=4)) == 5.0


class TestGrid:
    def test_isolated_deposit_tile_count_matches_enumeration(self):
        deposits = deposit_rows(("D1", 0.0, 15.0, "A", 1990, "Major", "1990-2019"))
        tiles = geo_service.grid_frame(deposits)
        assert set(tiles["tile_id"]) == brute_force_tiles(0.0, 0.0)
        assert 109 <= len(tiles) <= 113

    def test_offset_deposit_matches_enumeration(self):
        deposits = deposit_rows(("D1", -12.3, 27.8, "A", 1990, "Major", ""))
        tiles = geo_service.grid_frame(deposits)
        p = geo_service.project(-12.3, 27.8)
        assert set(tiles["tile_id"]) == brute_force_tiles(p.x_m, p.y_m)

    def test_overlapping_deposits_share_tiles(self):
        deposits = deposit_rows(
            ("D1", 0.0, 15.0, "A", 1990, "Major", ""),
            ("D2", 0.0, 15.1, "A", 1990, "Major", ""),
        )
        tiles = geo_service.grid_frame(deposits)
        assert tiles["tile_id"].is_unique
        union = brute_force_tiles(0.0, 0.0) | brute_force_tiles(geo_service.project(0.0, 15.1).x_m, 0.0)
        assert set(tiles["tile_id"]) == union

    def test_grid_is_sorted_and_input_order_free(self):
        a = deposit_rows(
            ("D1", 0.0, 15.0, "A", 1990, "Major", ""),
            ("D2", 1.0, 16.0, "A", 1990, "Major", ""),
        )
        b = a.iloc[::-1].reset_index(drop=True)
        pd.testing.assert_frame_equal(geo_service.grid_frame(a), geo_service.grid_frame(b))

    def test_empty_deposits(self):
        with pytest.raises(EmptyInputError):
            geo_service.grid_frame(deposit_rows())

    def test_generate_grid_returns_models(self):
        deposits = deposit_rows(("D1", 0.0, 15.0, "A", 1990, "Major", ""))
        tiles = geo_service.generate_grid(deposits)
        assert tiles[0].tile_id == tile_id_for(tiles[0].ix, tiles[0].iy)
        assert tiles[0].centroid.x_m == pytest.approx((tiles[0].ix + 0.5) * TILE)


class TestDeposits:
    def test_invalid_coordinate_names_deposit(self):
        deposits = deposit_rows(("BAD", 95.0, 0.0, "A", 1990, "", ""))
        with pytest.raises(InvalidCoordinateError, match="BAD"):
            geo_service.normalize_deposits(deposits)

    def test_duplicate_ids(self):
        deposits = deposit_rows(("D1", 0.0, 0.0, "A", 1990, "", ""), ("D1", 1.0, 1.0, "A", 1990, "", ""))
        with pytest.raises(InputError, match="duplicate"):
            geo_service.normalize_deposits(deposits)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="not found"):
            geo_service.load_deposits(tmp_path / "nope.csv")


def _one_tile(x_m: float, y_m: float = 0.0) -> pd.DataFrame:
    return pd.DataFrame({"tile_id": ["t"], "ix": [0], "iy": [0], "x_m": [x_m], "y_m": [y_m]})


def _projected(rows) -> pd.DataFrame:
    """Deposits placed directly in projected meters"""
    frame = pd.DataFrame(rows, columns=["deposit_id", "x_m", "y_m"])
    frame["lat"] = 0.0
    frame["lon"] = 15.0
    return frame


class TestAssignment:
    def test_active_beats_closer_inactive(self):
        deposits = _projected([("ACT", 30_000.0, 0.0), ("INA", 1_000.0, 0.0)])
        statuses = {"ACT": "Opening", "INA": "NotYetOpened"}
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, statuses)
        assert out.iloc[0]["deposit_id"] == "ACT"
        assert out.iloc[0]["band"] == Band.far.value

    def test_inactive_used_without_active(self):
        deposits = _projected([("INA", 5_000.0, 0.0), ("INB", 9_000.0, 0.0)])
        statuses = {"INA": "NotYetOpened", "INB": "NoLongerActive"}
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, statuses)
        assert out.iloc[0]["deposit_id"] == "INA"
        assert out.iloc[0]["band"] == Band.near.value

    def test_exactly_twenty_km_is_far(self):
        deposits = _projected([("D", 20_000.0, 0.0)])
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, {"D": "Opening"})
        assert out.iloc[0]["distance_m"] == 20_000.0
        assert out.iloc[0]["band"] == Band.far.value

    def test_just_inside_twenty_km_is_near(self):
        deposits = _projected([("D", 19_999.999, 0.0)])
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, {"D": "Opening"})
        assert out.iloc[0]["band"] == Band.near.value

    def test_forty_km_is_reachable_beyond_is_not(self):
        deposits = _projected([("D", 40_000.0, 0.0)])
        assert len(geo_service.nearest_assignment(_one_tile(0.0), deposits, {"D": "Opening"})) == 1
        deposits = _projected([("D", 40_000.5, 0.0)])
        assert len(geo_service.nearest_assignment(_one_tile(0.0), deposits, {"D": "Opening"})) == 0

    def test_tie_broken_by_deposit_id(self):
        deposits = _projected([("B", 10_000.0, 0.0), ("A", -10_000.0, 0.0)])
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, {"A": "Opening", "B": "Opening"})
        assert out.iloc[0]["deposit_id"] == "A"

    def test_mixed_active_categories_flagged(self):
        deposits = _projected([("O", 10_000.0, 0.0), ("C", -12_000.0, 0.0)])
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, {"O": "Opening", "C": "Closing"})
        assert bool(out.iloc[0]["dropped_confounded"])

    def test_same_active_category_not_flagged(self):
        deposits = _projected([("O1", 10_000.0, 0.0), ("O2", -12_000.0, 0.0)])
        out = geo_service.nearest_assignment(_one_tile(0.0), deposits, {"O1": "Opening", "O2": "Opening"})
        assert not bool(out.iloc[0]["dropped_confounded"])

    def test_missing_status(self):
        deposits = _projected([("D", 0.0, 0.0)])
        with pytest.raises(InputError):
            geo_service.nearest_assignment(_one_tile(0.0), deposits, {})

    def test_assign_frame_repeats_per_period(self):
        deposits = _projected([("D", 1_000.0, 0.0)])
        out = geo_service.assign_frame(_one_tile(0.0), deposits, {"D": "Continuous"}, range(1, 13))
        assert list(out["period"]) == list(range(1, 13))
        assert out["deposit_id"].nunique() == 1

    def test_assign_tiles_models(self):
        deposits = _projected([("D", 1_000.0, 0.0)])
        out = geo_service.assign_tiles(_one_tile(0.0), deposits, {"D": "Continuous"}, period=3)
        assert out[0].period == 3
        assert out[0].band == Band.near
