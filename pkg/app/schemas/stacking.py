from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from app.schemas.lifecycle import EventKind


class ControlRule(str, Enum):
    not_yet_opened = "NotYetOpened"
    late_treated = "LateTreated"
    continuous = "Continuous"


class Window(BaseModel):
    t_neg: int = -5
    t_pos: int = 5

    @model_validator(mode="after")
    def around_zero(self) -> "Window":
        if not (self.t_neg < 0 < self.t_pos):
            raise ValueError(f"window must satisfy t_neg < 0 < t_pos, got ({self.t_neg}, {self.t_pos})")
        return self

    class Config:
        frozen = True

    @property
    def relative_times(self) -> List[int]:
        """Relative periods carrying a coefficient (baseline t = 0 omitted)"""
        return [t for t in range(self.t_neg, self.t_pos + 1) if t != 0]


class Event(BaseModel):
    event_id: str
    country: str
    kind: EventKind
    # First active period (opening) or last active period (closing)
    event_period: int = Field(..., ge=1)
    # Period with relative time 0
    baseline_period: int
    control_rule: ControlRule
    treated_deposits: Tuple[str, ...]
    treated_tiles: Tuple[str, ...] = ()
    control_tiles: Tuple[str, ...] = ()
    centered: bool = False

    class Config:
        frozen = True

    def relative_time(self, period: int) -> int:
        return period - self.baseline_period

    def fully_observed(self, window: Window, n_periods: int) -> bool:
        return self.baseline_period + window.t_neg >= 1 and self.baseline_period + window.t_pos <= n_periods


class StackedSummary(BaseModel):
    events_in: int
    events_kept: int
    events_dropped_unbalanced: List[str] = []
    rows: int
    balanced: bool
    window: Window
    dropped_without_controls: List[str] = []
    note: Optional[str] = None


STACKED_COLUMNS = [
    "event_id",
    "tile_id",
    "deposit_id",
    "period",
    "rel_time",
    "treat_group",
    "treat_post",
]
