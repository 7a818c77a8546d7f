from enum import Enum
from typing import List, Optional

from pydantic import BaseModel

from app.schemas.lifecycle import MineStatus

OUTCOME_COLUMNS = ["log_urban", "log_crop", "wealth_z", "conflict_any"]

PANEL_COLUMNS = [
    "tile_id",
    "deposit_id",
    "country",
    "period",
    "status",
    "band",
    "distance_m",
    "event_period",
    "event_kind",
    "discovery_year",
    "first_active_year",
    "size_class",
    "democracy",
    "log_urban",
    "log_crop",
    "log_water",
    "wealth_z",
    "conflict_count",
    "conflict_any",
]


class SizeClass(str, Enum):
    small = "Small"
    large = "Large"


class MismatchReport(BaseModel):
    assignment_keys: int
    outcome_keys: int
    matched_keys: int
    assignments_without_outcome: int
    outcomes_without_assignment: int
    confounded_dropped: int
    deposits_without_status: int = 0
    countries_without_meta: int = 0


class BalanceRegressor(str, Enum):
    group_dummy = "group_dummy"
    log_opening_year = "log_opening_year"


class BalanceResult(BaseModel):
    covariate: str
    beta: Optional[float] = None
    se_mine_clustered: Optional[float] = None
    n: int
    n_clusters: int = 0
    estimable: bool = True


class BinMean(BaseModel):
    status: MineStatus
    bin_km: int
    period: int
    mean: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n: int = 0


class DemeanSummary(BaseModel):
    kept_rows: int
    dropped_rows: int
    reference: MineStatus
    cells: List[str] = []
