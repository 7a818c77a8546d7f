from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class ScreeningPool(str, Enum):
    pooled = "pooled"
    per_period = "per_period"


class EsdStep(BaseModel):
    iteration: int
    r_stat: float
    critical: float
    removed_id: int


class EsdResult(BaseModel):
    n_outliers: int
    outlier_indices: List[int]
    steps: List[EsdStep]


class OutlierReport(BaseModel):
    outcome: str
    flagged_count: int
    flagged_indices: List[int] = []
    confirmed_indices: List[int] = []
    alpha: float = 0.10
    critical_values: List[float] = []
    steps: List[EsdStep] = []
    # Pool label when screening runs per period
    pool: Optional[str] = None
    note: str = "screened before z-scoring"

    @model_validator(mode="after")
    def confirmed_subset(self) -> "OutlierReport":
        if not set(self.confirmed_indices) <= set(self.flagged_indices):
            raise ValueError("confirmed outliers must be a subset of flagged observations")
        if len(self.confirmed_indices) > self.flagged_count:
            raise ValueError("more confirmed outliers than flagged observations")
        return self


class ScreeningOptions(BaseModel):
    enabled: bool = True
    k: float = Field(2.0, gt=0)
    alpha: float = Field(0.10, gt=0, lt=1)
    pool: ScreeningPool = ScreeningPool.pooled
