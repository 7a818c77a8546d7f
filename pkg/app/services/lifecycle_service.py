import logging
import re
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from app.core.errors import IntervalError
from app.schemas.geo import Deposit
from app.schemas.lifecycle import (
    ActivityInterval,
    EventKind,
    MineStatus,
    PeriodCalendar,
    StatusRecord,
    TreatmentSchedule,
)

logger = logging.getLogger(__name__)

STATUS_COLUMNS = ["deposit_id", "status", "event_period", "event_kind", "first_active_year"]

_INTERVAL = re.compile(r"^\s*(-?\d+)\s*-\s*(-?\d+)\s*$")


class LifecycleService:
    """Calendar periods and the mine status taxonomy"""

    @staticmethod
    def period_of(year: int, calendar: PeriodCalendar = PeriodCalendar()) -> Optional[int]:
        """Period index of a calendar year; None outside the study window"""
        if year < calendar.start_year or year > calendar.end_year:
            return None
        return (year - calendar.start_year) // calendar.period_length + 1

    @staticmethod
    def parse_intervals(text: Union[str, Sequence[Tuple[int, int]], None]) -> List[ActivityInterval]:
        """Parse "start-end;start-end" into sorted intervals, rejecting overlaps"""
        if text is None:
            return []
        if isinstance(text, str):
            pieces = [p for p in text.split(";") if p.strip()]
            pairs = []
            for piece in pieces:
                match = _INTERVAL.match(piece)
                if not match:
                    raise IntervalError(f"cannot parse activity interval {piece!r}")
                pairs.append((int(match.group(1)), int(match.group(2))))
        else:
            pairs = [(int(a), int(b)) for a, b in text]
        try:
            intervals = sorted((ActivityInterval(start=a, end=b) for a, b in pairs), key=lambda i: (i.start, i.end))
        except ValueError as e:
            raise IntervalError(f"invalid activity interval: {e}")
        for prev, cur in zip(intervals, intervals[1:]):
            # Touching (prev.end + 1 == cur.start) is fine; sharing a year is not
            if cur.start <= prev.end:
                raise IntervalError(f"overlapping activity intervals {prev.start}-{prev.end} and {cur.start}-{cur.end}")
        return intervals

    def active_periods(self, intervals: Sequence[ActivityInterval], calendar: PeriodCalendar) -> List[int]:
        active = []
        for p in range(1, calendar.n_periods + 1):
            first, last = calendar.period_years(p)
            if any(iv.start <= last and iv.end >= first for iv in intervals):
                active.append(p)
        return active

    def classify(
        self,
        deposit_id: str,
        activity_intervals: Union[str, Sequence[Tuple[int, int]], None],
        discovery_year: Optional[int] = None,
        calendar: PeriodCalendar = PeriodCalendar(),
    ) -> StatusRecord:
        """Status, event timing and active periods of one deposit"""
        intervals = self.parse_intervals(activity_intervals)
        active = self.active_periods(intervals, calendar)
        n = calendar.n_periods
        first_year = None
        for iv in intervals:
            if iv.end >= calendar.start_year:
                first_year = max(iv.start, calendar.start_year)
                break

        event_period = None
        event_kind = None
        if not active:
            if intervals and all(iv.end < calendar.start_year for iv in intervals):
                status = MineStatus.no_longer_active
            else:
                # Never active or only after the window
                status = MineStatus.not_yet_opened
        elif len(active) == n:
            status = MineStatus.continuous
        else:
            contiguous = active == list(range(active[0], active[-1] + 1))
            if contiguous and active[0] >= 2 and active[-1] == n:
                status = MineStatus.opening
                event_period, event_kind = active[0], EventKind.opening
            elif contiguous and active[0] == 1 and active[-1] <= n - 1:
                status = MineStatus.closing
                event_period, event_kind = active[-1], EventKind.closing
            else:
                status = MineStatus.opening_closing
        return StatusRecord(
            deposit_id=str(deposit_id),
            status=status,
            event_period=event_period,
            event_kind=event_kind,
            active_periods=active,
            first_active_year=first_year,
        )

    def classify_status(
        self,
        activity_intervals: Union[str, Sequence[Tuple[int, int]], None],
        discovery_year: Optional[int] = None,
        calendar: PeriodCalendar = PeriodCalendar(),
    ) -> MineStatus:
        return self.classify("", activity_intervals, discovery_year, calendar).status

    def schedule(self, record: StatusRecord) -> TreatmentSchedule:
        return TreatmentSchedule(
            deposit_id=record.deposit_id, event_period=record.event_period, event_kind=record.event_kind
        )

    def classify_deposits(
        self, deposits: Union[pd.DataFrame, Sequence[Deposit]], calendar: PeriodCalendar = PeriodCalendar()
    ) -> pd.DataFrame:
        """Status table, one row per deposit"""
        if not isinstance(deposits, pd.DataFrame):
            deposits = pd.DataFrame([d.model_dump() for d in deposits])
        rows = []
        for deposit_id, intervals, discovered in zip(
            deposits["deposit_id"], deposits["activity_intervals"], deposits["discovery_year"]
        ):
            text = "" if pd.isna(intervals) else str(intervals)
            try:
                record = self.classify(str(deposit_id), text, None if pd.isna(discovered) else int(discovered), calendar)
            except IntervalError as e:
                raise IntervalError(f"deposit {deposit_id}: {e.detail}")
            rows.append(
                {
                    "deposit_id": record.deposit_id,
                    "status": record.status.value,
                    "event_period": record.event_period,
                    "event_kind": record.event_kind.value if record.event_kind else None,
                    "first_active_year": record.first_active_year,
                }
            )
        out = pd.DataFrame(rows, columns=STATUS_COLUMNS)
        out["event_period"] = out["event_period"].astype("Int64")
        out["first_active_year"] = out["first_active_year"].astype("Int64")
        counts = out["status"].value_counts().sort_index()
        logger.info("classified %d deposits: %s", len(out), ", ".join(f"{k}={v}" for k, v in counts.items()))
        return out.sort_values("deposit_id", kind="mergesort").reset_index(drop=True)

    def status_counts(self, statuses: pd.DataFrame) -> Dict[str, int]:
        counts = {s.value: 0 for s in MineStatus}
        counts.update(statuses["status"].value_counts().to_dict())
        return counts

    def restrict_recent_discoveries(
        self, deposits: pd.DataFrame, calendar: PeriodCalendar = PeriodCalendar()
    ) -> Tuple[pd.DataFrame, int]:
        """Keep deposits discovered during or after the first study year.

        Rows without a discovery year are excluded; their count is returned
        alongside the filtered frame.
        """
        if len(deposits) == 0:
            return deposits.copy(), 0
        years = pd.to_numeric(deposits["discovery_year"], errors="coerce")
        missing = int(years.isna().sum())
        if missing:
            logger.warning("recent-discovery filter: %d deposit(s) without discovery year excluded", missing)
        keep = years.notna() & (years >= calendar.start_year)
        logger.info("recent-discovery filter kept %d of %d deposits", int(keep.sum()), len(deposits))
        return deposits.loc[keep].reset_index(drop=True), missing


lifecycle_service = LifecycleService()
