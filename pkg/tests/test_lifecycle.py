import pytest

from app.core.errors import IntervalError
from app.schemas.lifecycle import EventKind, MineStatus, PeriodCalendar
from app.services.lifecycle_service import lifecycle_service
from tests.conftest import deposit_rows


class TestCalendar:
    def test_default_window(self):
        calendar = PeriodCalendar()
        assert calendar.end_year == 2019
        assert calendar.period_years(1) == (1984, 1986)
        assert calendar.period_years(12) == (2017, 2019)

    @pytest.mark.parametrize("year,period", [(1984, 1), (1986, 1), (1987, 2), (2000, 6), (2019, 12)])
    def test_period_of(self, year, period):
        assert lifecycle_service.period_of(year) == period

    @pytest.mark.parametrize("year", [1983, 2020])
    def test_period_of_outside_window(self, year):
        assert lifecycle_service.period_of(year) is None


class TestIntervals:
    def test_parse_sorted(self):
        intervals = lifecycle_service.parse_intervals("2005-2010;1990-1995")
        assert [(i.start, i.end) for i in intervals] == [(1990, 1995), (2005, 2010)]

    def test_touching_allowed(self):
        assert len(lifecycle_service.parse_intervals("1990-1995;1996-2000")) == 2

    def test_overlap_rejected(self):
        with pytest.raises(IntervalError, match="overlapping"):
            lifecycle_service.parse_intervals("1990-1996;1995-2000")

    def test_reversed_rejected(self):
        with pytest.raises(IntervalError):
            lifecycle_service.parse_intervals("2000-1990")

    def test_garbage_rejected(self):
        with pytest.raises(IntervalError):
            lifecycle_service.parse_intervals("since 1990")

    def test_empty(self):
        assert lifecycle_service.parse_intervals("") == []
        assert lifecycle_service.parse_intervals(None) == []


class TestClassify:
    @pytest.mark.parametrize(
        "intervals,status",
        [
            ("1970-2019", MineStatus.continuous),
            ("1984-2019", MineStatus.continuous),
            ("1999-2019", MineStatus.opening),
            ("1970-2005", MineStatus.closing),
            ("1970-1990;2000-2019", MineStatus.opening_closing),
            ("1990-2000", MineStatus.opening_closing),
            ("1960-1975", MineStatus.no_longer_active),
            ("", MineStatus.not_yet_opened),
            ("2021-2025", MineStatus.not_yet_opened),
        ],
    )
    def test_status(self, intervals, status):
        assert lifecycle_service.classify_status(intervals) == status

    def test_opening_event_period_is_first_active(self):
        record = lifecycle_service.classify("D", "1999-2019")
        assert record.event_kind == EventKind.opening
        # 1999 falls in 1999-2001, the sixth period
        assert record.event_period == 6
        assert record.active_periods == list(range(6, 13))
        assert record.first_active_year == 1999

    def test_closing_event_period_is_last_active(self):
        record = lifecycle_service.classify("D", "1970-2005")
        assert record.event_kind == EventKind.closing
        assert record.event_period == 8
        assert record.first_active_year == 1984

    def test_single_active_year_marks_period_active(self):
        record = lifecycle_service.classify("D", "2019-2019")
        assert record.status == MineStatus.opening
        assert record.event_period == 12

    def test_schedule(self):
        record = lifecycle_service.classify("D", "1999-2019")
        schedule = lifecycle_service.schedule(record)
        assert schedule.event_period == 6
        assert schedule.event_kind == EventKind.opening

    def test_custom_calendar(self):
        calendar = PeriodCalendar(start_year=2000, period_length=5, n_periods=4)
        record = lifecycle_service.classify("D", "2006-2019", calendar=calendar)
        assert record.status == MineStatus.opening
        assert record.event_period == 2


class TestDepositTable:
    def test_classify_deposits(self):
        deposits = deposit_rows(
            ("B", 0, 0, "A", 1990, "Major", "1999-2019"),
            ("A", 0, 0, "A", 1950, "Minor", "1950-2019"),
            ("C", 0, 0, "A", 1995, "Minor", None),
        )
        out = lifecycle_service.classify_deposits(deposits)
        assert list(out["deposit_id"]) == ["A", "B", "C"]
        assert list(out["status"]) == ["Continuous", "Opening", "NotYetOpened"]
        assert out.loc[1, "event_period"] == 6
        counts = lifecycle_service.status_counts(out)
        assert counts["Opening"] == 1 and counts["Closing"] == 0

    def test_bad_interval_names_deposit(self):
        deposits = deposit_rows(("X9", 0, 0, "A", 1990, "", "1990-1995;1994-1999"))
        with pytest.raises(IntervalError, match="X9"):
            lifecycle_service.classify_deposits(deposits)

    def test_recent_discoveries(self):
        deposits = deposit_rows(
            ("A", 0, 0, "A", 1990, "", ""),
            ("B", 0, 0, "A", 1975, "", ""),
            ("C", 0, 0, "A", None, "", ""),
            ("D", 0, 0, "A", 1984, "", ""),
        )
        kept, missing = lifecycle_service.restrict_recent_discoveries(deposits)
        assert list(kept["deposit_id"]) == ["A", "D"]
        assert missing == 1
