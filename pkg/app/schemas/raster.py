import math
from enum import Enum, IntEnum
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

MASK_SIZE = 224


class LandClass(IntEnum):
    other = 0
    urban = 1
    cropland = 2
    water = 3


class MaskKind(str, Enum):
    landuse = "landuse"
    mine = "mine"


LABELS = {
    MaskKind.landuse: frozenset(int(c) for c in LandClass),
    MaskKind.mine: frozenset({0, 1}),
}


class Mask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: MaskKind
    pixels: np.ndarray
    width: int = MASK_SIZE
    height: int = MASK_SIZE

    @model_validator(mode="after")
    def check_pixels(self) -> "Mask":
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(f"mask must be {self.height}x{self.width}, got {self.pixels.shape}")
        return self

    @property
    def size(self) -> int:
        return self.width * self.height


class ClassShares(BaseModel):
    valid_pixels: int
    counts: Dict[LandClass, int]
    shares: Dict[LandClass, float]

    def share(self, cls: LandClass) -> float:
        return self.shares[cls]


class LogZeroPolicy(str, Enum):
    smooth = "smooth"
    drop = "drop"


class OutcomeRow(BaseModel):
    tile_id: str
    period: int = Field(..., ge=1)
    log_urban: Optional[float] = None
    log_crop: Optional[float] = None
    log_water: Optional[float] = None
    wealth_z: Optional[float] = None
    conflict_count: Optional[int] = Field(None, ge=0)

    @property
    def conflict_any(self) -> Optional[int]:
        if self.conflict_count is None:
            return None
        return int(self.conflict_count >= 1)

    @model_validator(mode="after")
    def finite_wealth(self) -> "OutcomeRow":
        if self.wealth_z is not None and not math.isfinite(self.wealth_z):
            raise ValueError("wealth_z must be finite")
        return self
