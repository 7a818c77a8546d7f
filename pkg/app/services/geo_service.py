import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from app.core.deps import parallel_map
from app.core.errors import EmptyInputError, InputError, InvalidCoordinateError
from app.core.storage import read_csv
from app.schemas.geo import FAR_LIMIT_M, NEAR_LIMIT_M, Assignment, Band, Deposit, ProjectedPoint, ProjectionParams, Tile
from app.schemas.lifecycle import ACTIVE_STATUSES, MineStatus

logger = logging.getLogger(__name__)

DEFAULT_TILE_SIZE_M = 6720.0
DEFAULT_RADIUS_M = FAR_LIMIT_M

DEPOSIT_COLUMNS = ["deposit_id", "lat", "lon", "country", "discovery_year", "size_class", "activity_intervals"]
TILE_COLUMNS = ["tile_id", "ix", "iy", "x_m", "y_m"]
ASSIGNMENT_COLUMNS = ["tile_id", "period", "deposit_id", "distance_m", "band", "dropped_confounded"]

Deposits = Union[pd.DataFrame, Sequence[Deposit]]


def tile_id_for(ix: int, iy: int) -> str:
    return f"x{ix}y{iy}"


class GeoService:
    """Sinusoidal projection, tile grid and tile-to-deposit assignment"""

    @staticmethod
    def project(lat_deg: float, lon_deg: float, params: ProjectionParams = ProjectionParams()) -> ProjectedPoint:
        """Sinusoidal projection of one coordinate pair"""
        if not (math.isfinite(lat_deg) and math.isfinite(lon_deg)):
            raise InvalidCoordinateError(f"non-finite coordinate ({lat_deg}, {lon_deg})")
        if not (-90.0 <= lat_deg <= 90.0 and -180.0 <= lon_deg <= 180.0):
            raise InvalidCoordinateError(f"coordinate out of range ({lat_deg}, {lon_deg})")
        phi = math.radians(lat_deg)
        dlam = math.radians(lon_deg - params.central_meridian_deg)
        r = params.sphere_radius_m
        return ProjectedPoint(x_m=r * dlam * math.cos(phi), y_m=r * phi)

    @staticmethod
    def project_many(
        lat_deg: np.ndarray, lon_deg: np.ndarray, params: ProjectionParams = ProjectionParams()
    ) -> Tuple[np.ndarray, np.ndarray]:
        lat = np.asarray(lat_deg, dtype=float)
        lon = np.asarray(lon_deg, dtype=float)
        bad = ~(np.isfinite(lat) & np.isfinite(lon)) | (np.abs(lat) > 90.0) | (np.abs(lon) > 180.0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InvalidCoordinateError(f"invalid coordinate at row {i}: ({lat[i]}, {lon[i]})")
        phi = np.radians(lat)
        r = params.sphere_radius_m
        x = r * np.radians(lon - params.central_meridian_deg) * np.cos(phi)
        return x, r * phi

    @staticmethod
    def inverse(point: ProjectedPoint, params: ProjectionParams = ProjectionParams()) -> Tuple[float, float]:
        """(lat, lon) in degrees; undefined at the poles"""
        r = params.sphere_radius_m
        phi = point.y_m / r
        cos_phi = math.cos(phi)
        if abs(cos_phi) < 1e-15:
            raise InvalidCoordinateError("inverse projection is undefined at the poles")
        lon = params.central_meridian_deg + math.degrees(point.x_m / (r * cos_phi))
        return math.degrees(phi), lon

    @staticmethod
    def distance(p1: ProjectedPoint, p2: ProjectedPoint) -> float:
        return math.hypot(p1.x_m - p2.x_m, p1.y_m - p2.y_m)

    # Deposits

    def load_deposits(self, path: Path) -> pd.DataFrame:
        """Read and validate the deposit CSV"""
        frame = read_csv(
            path,
            required=DEPOSIT_COLUMNS,
            dtype={"deposit_id": str, "country": str, "size_class": str, "activity_intervals": str},
        )
        return self.normalize_deposits(frame, source=str(path))

    def normalize_deposits(self, deposits: Deposits, source: str = "deposits") -> pd.DataFrame:
        if not isinstance(deposits, pd.DataFrame):
            deposits = pd.DataFrame([d.model_dump() for d in deposits], columns=DEPOSIT_COLUMNS)
        frame = deposits.copy()
        for column in DEPOSIT_COLUMNS:
            if column not in frame.columns:
                frame[column] = np.nan if column == "discovery_year" else ""
        frame["deposit_id"] = frame["deposit_id"].astype(str).str.strip()
        frame["country"] = frame["country"].astype(str).str.strip()
        frame["activity_intervals"] = frame["activity_intervals"].fillna("").astype(str).str.strip()
        frame["size_class"] = frame["size_class"].fillna("").astype(str).str.strip()
        frame["discovery_year"] = pd.to_numeric(frame["discovery_year"], errors="coerce").astype("Int64")
        frame["lat"] = pd.to_numeric(frame["lat"], errors="coerce")
        frame["lon"] = pd.to_numeric(frame["lon"], errors="coerce")

        bad = ~(np.isfinite(frame["lat"]) & np.isfinite(frame["lon"]))
        bad |= (frame["lat"].abs() > 90) | (frame["lon"].abs() > 180)
        if bad.any():
            row = frame.loc[bad].iloc[0]
            raise InvalidCoordinateError(
                f"{source}: deposit {row['deposit_id']} has invalid coordinates ({row['lat']}, {row['lon']})"
            )
        duplicated = frame["deposit_id"].duplicated()
        if duplicated.any():
            raise InputError(f"{source}: duplicate deposit_id {frame.loc[duplicated, 'deposit_id'].iloc[0]}")
        return frame.sort_values("deposit_id", kind="mergesort").reset_index(drop=True)

    def with_projection(self, deposits: pd.DataFrame, params: ProjectionParams) -> pd.DataFrame:
        """Add x_m / y_m unless the frame already carries projected coordinates"""
        if {"x_m", "y_m"} <= set(deposits.columns):
            return deposits
        out = deposits.copy()
        out["x_m"], out["y_m"] = self.project_many(out["lat"].to_numpy(), out["lon"].to_numpy(), params)
        return out

    # Grid

    @staticmethod
    def _tiles_around(center: Tuple[float, float], tile_size_m: float, radius_m: float) -> np.ndarray:
        x, y = center
        ix = np.arange(math.floor((x - radius_m) / tile_size_m - 0.5), math.ceil((x + radius_m) / tile_size_m - 0.5) + 1)
        iy = np.arange(math.floor((y - radius_m) / tile_size_m - 0.5), math.ceil((y + radius_m) / tile_size_m - 0.5) + 1)
        gx, gy = np.meshgrid(ix, iy, indexing="ij")
        cx = (gx + 0.5) * tile_size_m
        cy = (gy + 0.5) * tile_size_m
        inside = np.hypot(cx - x, cy - y) <= radius_m
        return np.column_stack([gx[inside], gy[inside]])

    def grid_frame(
        self,
        deposits: Deposits,
        params: ProjectionParams = ProjectionParams(),
        tile_size_m: float = DEFAULT_TILE_SIZE_M,
        radius_m: float = DEFAULT_RADIUS_M,
    ) -> pd.DataFrame:
        """Tiles whose centroid lies within radius_m of a deposit, one row per tile"""
        if tile_size_m <= 0:
            raise InputError(f"tile_size_m must be positive, got {tile_size_m}")
        frame = deposits if isinstance(deposits, pd.DataFrame) else self.normalize_deposits(deposits)
        if len(frame) == 0:
            raise EmptyInputError("cannot build a tile grid without deposits")
        frame = self.with_projection(frame, params)
        centers = list(zip(frame["x_m"].to_numpy(), frame["y_m"].to_numpy()))
        blocks = parallel_map(lambda c: self._tiles_around(c, tile_size_m, radius_m), centers)
        indices = np.unique(np.vstack(blocks), axis=0)

        tiles = pd.DataFrame({"ix": indices[:, 0].astype(int), "iy": indices[:, 1].astype(int)})
        tiles["tile_id"] = [tile_id_for(ix, iy) for ix, iy in zip(tiles["ix"], tiles["iy"])]
        tiles["x_m"] = (tiles["ix"] + 0.5) * tile_size_m
        tiles["y_m"] = (tiles["iy"] + 0.5) * tile_size_m
        logger.info("grid: %d tiles around %d deposits", len(tiles), len(frame))
        return tiles.loc[:, TILE_COLUMNS].sort_values(["ix", "iy"], kind="mergesort").reset_index(drop=True)

    def generate_grid(
        self,
        deposits: Deposits,
        params: ProjectionParams = ProjectionParams(),
        tile_size_m: float = DEFAULT_TILE_SIZE_M,
        radius_m: float = DEFAULT_RADIUS_M,
    ) -> List[Tile]:
        tiles = self.grid_frame(deposits, params, tile_size_m, radius_m)
        return [
            Tile(tile_id=row.tile_id, ix=row.ix, iy=row.iy, centroid=ProjectedPoint(x_m=row.x_m, y_m=row.y_m))
            for row in tiles.itertuples(index=False)
        ]

    # Assignment

    @staticmethod
    def _status_lookup(statuses: Union[pd.DataFrame, Mapping[str, MineStatus]]) -> Dict[str, MineStatus]:
        if isinstance(statuses, pd.DataFrame):
            return {str(k): MineStatus(v) for k, v in zip(statuses["deposit_id"], statuses["status"])}
        return {str(k): MineStatus(v) for k, v in statuses.items()}

    def nearest_assignment(
        self,
        tiles: pd.DataFrame,
        deposits: pd.DataFrame,
        statuses: Union[pd.DataFrame, Mapping[str, MineStatus]],
        params: ProjectionParams = ProjectionParams(),
        radius_m: float = DEFAULT_RADIUS_M,
    ) -> pd.DataFrame:
        """Closest Active deposit within radius, else closest Inactive one.

        Tiles within reach of Active deposits of different categories are
        flagged dropped_confounded. Returns one row per reachable tile.
        """
        status_of = self._status_lookup(statuses)
        missing = sorted(set(deposits["deposit_id"]) - set(status_of))
        if missing:
            raise InputError(f"no status for deposit(s): {', '.join(missing[:5])}")
        deposits = self.with_projection(deposits, params).reset_index(drop=True)
        columns = ["tile_id", "deposit_id", "distance_m", "band", "dropped_confounded"]
        if len(tiles) == 0 or len(deposits) == 0:
            return pd.DataFrame(columns=columns)

        tile_xy = tiles[["x_m", "y_m"]].to_numpy(dtype=float)
        dep_xy = deposits[["x_m", "y_m"]].to_numpy(dtype=float)
        pairs = cKDTree(tile_xy).sparse_distance_matrix(cKDTree(dep_xy), radius_m + 1e-6, output_type="ndarray")
        ti = pairs["i"].astype(int)
        di = pairs["j"].astype(int)
        dist = np.hypot(tile_xy[ti, 0] - dep_xy[di, 0], tile_xy[ti, 1] - dep_xy[di, 1])
        keep = dist <= radius_m

        cand = pd.DataFrame(
            {
                "tile_id": tiles["tile_id"].to_numpy()[ti[keep]],
                "deposit_id": deposits["deposit_id"].to_numpy()[di[keep]],
                "distance_m": dist[keep],
            }
        )
        cand["status"] = cand["deposit_id"].map(status_of)
        cand["active"] = cand["status"].map(lambda s: s in ACTIVE_STATUSES).astype(bool)

        active = cand.loc[cand["active"]]
        categories = active.groupby("tile_id")["status"].nunique()
        has_active = set(active["tile_id"])

        pool = cand.loc[cand["active"] | ~cand["tile_id"].isin(has_active)]
        chosen = (
            pool.sort_values(["tile_id", "distance_m", "deposit_id"], kind="mergesort")
            .drop_duplicates("tile_id", keep="first")
            .reset_index(drop=True)
        )
        chosen["band"] = np.where(chosen["distance_m"] < NEAR_LIMIT_M, Band.near.value, Band.far.value)
        chosen["dropped_confounded"] = chosen["tile_id"].map(categories).fillna(0).astype(int) > 1
        n_conf = int(chosen["dropped_confounded"].sum())
        if n_conf:
            logger.info("assignment: %d of %d tiles near multiple Active categories", n_conf, len(chosen))
        return chosen.loc[:, columns]

    def assign_frame(
        self,
        tiles: pd.DataFrame,
        deposits: pd.DataFrame,
        statuses: Union[pd.DataFrame, Mapping[str, MineStatus]],
        periods: Iterable[int],
        params: ProjectionParams = ProjectionParams(),
        radius_m: float = DEFAULT_RADIUS_M,
    ) -> pd.DataFrame:
        """Assignments for every period; statuses are per deposit so each period repeats the same choice"""
        base = self.nearest_assignment(tiles, deposits, statuses, params, radius_m)
        periods = sorted(set(int(p) for p in periods))
        frames = [base.assign(period=p) for p in periods]
        out = pd.concat(frames, ignore_index=True) if frames else base.assign(period=pd.Series(dtype=int))
        return out.loc[:, ASSIGNMENT_COLUMNS].sort_values(["tile_id", "period"], kind="mergesort").reset_index(drop=True)

    def assign_tiles(
        self,
        tiles: Union[pd.DataFrame, Sequence[Tile]],
        deposits: Deposits,
        statuses: Union[pd.DataFrame, Mapping[str, MineStatus]],
        period: int,
        params: ProjectionParams = ProjectionParams(),
    ) -> List[Assignment]:
        if not isinstance(tiles, pd.DataFrame):
            tiles = pd.DataFrame(
                [{"tile_id": t.tile_id, "ix": t.ix, "iy": t.iy, "x_m": t.centroid.x_m, "y_m": t.centroid.y_m} for t in tiles],
                columns=TILE_COLUMNS,
            )
        if not isinstance(deposits, pd.DataFrame):
            deposits = self.normalize_deposits(deposits)
        frame = self.assign_frame(tiles, deposits, statuses, [period], params)
        return [
            Assignment(
                tile_id=row.tile_id,
                period=row.period,
                deposit_id=row.deposit_id,
                distance_m=row.distance_m,
                band=Band(row.band),
                dropped_confounded=bool(row.dropped_confounded),
            )
            for row in frame.itertuples(index=False)
        ]


geo_service = GeoService()
