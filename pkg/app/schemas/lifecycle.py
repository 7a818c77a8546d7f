from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class MineStatus(str, Enum):
    continuous = "Continuous"
    opening = "Opening"
    closing = "Closing"
    opening_closing = "OpeningClosing"
    no_longer_active = "NoLongerActive"
    not_yet_opened = "NotYetOpened"

    @property
    def is_active(self) -> bool:
        return self in ACTIVE_STATUSES


ACTIVE_STATUSES = frozenset(
    {MineStatus.continuous, MineStatus.opening, MineStatus.closing, MineStatus.opening_closing}
)
INACTIVE_STATUSES = frozenset({MineStatus.no_longer_active, MineStatus.not_yet_opened})


class EventKind(str, Enum):
    opening = "opening"
    closing = "closing"


class PeriodCalendar(BaseModel):
    start_year: int = 1984
    period_length: int = Field(3, ge=1)
    n_periods: int = Field(12, ge=1)

    class Config:
        frozen = True

    @property
    def end_year(self) -> int:
        return self.start_year + self.period_length * self.n_periods - 1

    def period_years(self, period: int) -> Tuple[int, int]:
        """Inclusive calendar years covered by a period"""
        first = self.start_year + self.period_length * (period - 1)
        return first, first + self.period_length - 1

    def first_year(self, period: int) -> int:
        return self.period_years(period)[0]


class ActivityInterval(BaseModel):
    start: int
    end: int

    @model_validator(mode="after")
    def ordered(self) -> "ActivityInterval":
        if self.end < self.start:
            raise ValueError(f"interval end {self.end} precedes start {self.start}")
        return self


class TreatmentSchedule(BaseModel):
    deposit_id: str
    event_period: Optional[int] = None
    event_kind: Optional[EventKind] = None


class StatusRecord(BaseModel):
    deposit_id: str
    status: MineStatus
    event_period: Optional[int] = None
    event_kind: Optional[EventKind] = None
    active_periods: List[int] = []
    first_active_year: Optional[int] = None
