import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, field_validator


class Band(str, Enum):
    near = "Near"
    far = "Far"


NEAR_LIMIT_M = 20_000.0
FAR_LIMIT_M = 40_000.0


class ProjectionParams(BaseModel):
    central_meridian_deg: float = Field(15.0, ge=-180.0, le=180.0, description="Central meridian in degrees east")
    sphere_radius_m: float = Field(6_371_007.181, gt=0.0, description="Sphere radius in meters")

    class Config:
        frozen = True


class ProjectedPoint(BaseModel):
    x_m: float = Field(..., description="Meters east of the central meridian")
    y_m: float = Field(..., description="Meters north of the equator")

    @field_validator("x_m", "y_m")
    @classmethod
    def finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("projected coordinates must be finite")
        return v

    class Config:
        frozen = True


class Deposit(BaseModel):
    deposit_id: str
    lat: float = Field(..., ge=-90.0, le=90.0)
    lon: float = Field(..., ge=-180.0, le=180.0)
    country: str
    discovery_year: Optional[int] = None
    size_class: Optional[str] = None
    # "start1-end1;start2-end2" in calendar years, empty = never active
    activity_intervals: str = ""

    @field_validator("deposit_id", "country", mode="before")
    @classmethod
    def as_text(cls, v) -> str:
        return str(v).strip()

    @field_validator("activity_intervals", mode="before")
    @classmethod
    def blank_intervals(cls, v) -> str:
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return ""
        return str(v).strip()

    @field_validator("discovery_year", mode="before")
    @classmethod
    def optional_year(cls, v):
        if v is None or v == "" or (isinstance(v, float) and math.isnan(v)):
            return None
        return int(v)


class Tile(BaseModel):
    tile_id: str
    ix: int
    iy: int
    centroid: ProjectedPoint

    class Config:
        frozen = True


class Assignment(BaseModel):
    tile_id: str
    period: int = Field(..., ge=1)
    deposit_id: str
    distance_m: float = Field(..., ge=0.0, le=FAR_LIMIT_M)
    band: Band
    dropped_confounded: bool = False

    class Config:
        frozen = True
