import logging
from typing import Iterable, List, Sequence, Tuple

import pandas as pd

from app.core.errors import EmptyInputError, InputError
from app.schemas.lifecycle import EventKind, MineStatus
from app.schemas.stacking import STACKED_COLUMNS, ControlRule, Event, StackedSummary, Window
from app.services.panel_service import panel_service

logger = logging.getLogger(__name__)

TREATED_STATUS = {EventKind.opening: MineStatus.opening, EventKind.closing: MineStatus.closing}
EVENT_COLUMNS = ["event_id", "country", "kind", "event_period", "baseline_period", "control_rule", "treated_deposits", "treated_tiles", "control_tiles"]


def event_id_for(country: str, kind: EventKind, event_period: int) -> str:
    return f"{country}:{kind.value}:{event_period:02d}"


class StackingService:
    """Treatment events, per-event control groups and the stacked dataset"""

    @staticmethod
    def _tile_table(panel: pd.DataFrame) -> pd.DataFrame:
        tiles = panel.drop_duplicates("tile_id").loc[:, ["tile_id", "deposit_id", "country", "status", "event_period"]]
        return tiles.sort_values("tile_id", kind="mergesort").reset_index(drop=True)

    def build_events(
        self,
        panel: pd.DataFrame,
        kind: EventKind,
        control_rule: ControlRule,
        window: Window = Window(),
    ) -> List[Event]:
        events, _ = self.build_event_set(panel, kind, control_rule, window)
        return events

    def build_event_set(
        self,
        panel: pd.DataFrame,
        kind: EventKind,
        control_rule: ControlRule,
        window: Window = Window(),
    ) -> Tuple[List[Event], List[str]]:
        """One event per (country, event period) with its own control tiles,
        plus the ids of events dropped for lack of controls.

        NotYetOpened and Continuous controls come from the same country.
        LateTreated controls are Opening tiles of the same country whose own
        baseline lies beyond the event window.
        """
        kind = EventKind(kind)
        control_rule = ControlRule(control_rule)
        tiles = self._tile_table(panel)
        treated = tiles.loc[tiles["status"] == TREATED_STATUS[kind].value].copy()
        treated["event_period"] = treated["event_period"].astype(int)

        events: List[Event] = []
        dropped: List[str] = []
        for (country, event_period), group in treated.groupby(["country", "event_period"], sort=True):
            baseline = int(event_period) - 1
            # Controls never cross a border
            same_country = tiles.loc[tiles["country"] == country]
            if control_rule == ControlRule.late_treated:
                late = same_country.loc[same_country["status"] == MineStatus.opening.value]
                controls = late.loc[late["event_period"].astype(int) - 1 > baseline + window.t_pos]
            else:
                controls = same_country.loc[same_country["status"] == MineStatus(control_rule.value).value]
            event_id = event_id_for(str(country), kind, int(event_period))
            if len(controls) == 0:
                dropped.append(event_id)
                continue
            events.append(
                Event(
                    event_id=event_id,
                    country=str(country),
                    kind=kind,
                    event_period=int(event_period),
                    baseline_period=baseline,
                    control_rule=control_rule,
                    treated_deposits=tuple(sorted(group["deposit_id"].unique())),
                    treated_tiles=tuple(sorted(group["tile_id"])),
                    control_tiles=tuple(sorted(controls["tile_id"])),
                )
            )
        if dropped:
            logger.warning("%d %s event(s) without %s controls dropped: %s", len(dropped), kind.value, control_rule.value, ", ".join(dropped))
        logger.info("built %d %s event(s) with %s controls", len(events), kind.value, control_rule.value)
        return events, dropped

    @staticmethod
    def center_closing(events: Iterable[Event]) -> List[Event]:
        """Put relative time 0 at the last active period of closing events"""
        out = []
        for event in events:
            if event.kind != EventKind.closing:
                raise InputError(f"event {event.event_id} is not a closing event")
            out.append(event.model_copy(update={"baseline_period": event.event_period, "centered": True}))
        return out

    def stack(
        self,
        panel: pd.DataFrame,
        events: Sequence[Event],
        window: Window = Window(),
        balanced: bool = True,
        n_periods: int = 12,
        dropped_without_controls: Sequence[str] = (),
    ) -> Tuple[pd.DataFrame, StackedSummary]:
        """Replicate each event's treated and control tiles over its window"""
        if len(events) == 0:
            raise EmptyInputError("nothing to stack: no events")
        kept_events = list(events)
        unbalanced: List[str] = []
        if balanced:
            unbalanced = [e.event_id for e in kept_events if not e.fully_observed(window, n_periods)]
            kept_events = [e for e in kept_events if e.fully_observed(window, n_periods)]
            if unbalanced:
                logger.info("balanced window drops %d event(s): %s", len(unbalanced), ", ".join(unbalanced))

        # Tile membership per event, treated first
        membership = []
        for event in kept_events:
            for tile_ids, group in ((event.treated_tiles, 1), (event.control_tiles, 0)):
                membership.append(
                    pd.DataFrame(
                        {"event_id": event.event_id, "tile_id": list(tile_ids), "treat_group": group, "baseline": event.baseline_period}
                    )
                )
        panel_cols = [c for c in panel.columns if c not in ("event_id",)]
        if membership:
            members = pd.concat(membership, ignore_index=True)
            stacked = members.merge(panel.loc[:, panel_cols], on="tile_id", how="inner")
            stacked["rel_time"] = stacked["period"].astype(int) - stacked["baseline"].astype(int)
            stacked = stacked.loc[stacked["rel_time"].between(window.t_neg, window.t_pos)]
        else:
            stacked = pd.DataFrame(columns=["event_id", "tile_id", "treat_group", "rel_time", *[c for c in panel_cols if c != "tile_id"]])
        stacked = stacked.drop(columns=["baseline"], errors="ignore")
        stacked["treat_post"] = (stacked["treat_group"].astype(int) * (stacked["rel_time"].astype(int) >= 1)).astype(int)
        stacked = panel_service.add_categories(stacked) if len(stacked) else stacked

        # Fixed column order, then stable row order
        ordered = STACKED_COLUMNS + [c for c in stacked.columns if c not in STACKED_COLUMNS]
        stacked = stacked.loc[:, ordered].sort_values(["event_id", "tile_id", "period"], kind="mergesort").reset_index(drop=True)
        summary = StackedSummary(
            events_in=len(events),
            events_kept=len(kept_events),
            events_dropped_unbalanced=unbalanced,
            rows=len(stacked),
            balanced=balanced,
            window=window,
            dropped_without_controls=list(dropped_without_controls),
        )
        logger.info("stacked %d event(s) into %d rows", len(kept_events), len(stacked))
        return stacked, summary

    def ordinary_panel(
        self,
        panel: pd.DataFrame,
        kind: EventKind,
        control_status: MineStatus,
        centered: bool = True,
    ) -> pd.DataFrame:
        """Unstacked DiD sample: treated-status tiles plus control-status tiles.

        treat_post switches on at each tile's own first treated period: the
        first active period of an opening, the first inactive period of a
        centred closing.
        """
        kind = EventKind(kind)
        treated_status = TREATED_STATUS[kind].value
        data = panel.loc[panel["status"].isin([treated_status, MineStatus(control_status).value])].copy()
        data["treat_group"] = (data["status"] == treated_status).astype(int)
        event_period = pd.to_numeric(data["event_period"], errors="coerce")
        if kind == EventKind.opening or not centered:
            baseline = event_period - 1
        else:
            baseline = event_period
        data["rel_time"] = (data["period"] - baseline).where(data["treat_group"] == 1)
        data["treat_post"] = ((data["treat_group"] == 1) & (data["rel_time"] >= 1)).astype(int)
        data = panel_service.add_categories(data)
        return data.sort_values(["tile_id", "period"], kind="mergesort").reset_index(drop=True)

    @staticmethod
    def events_frame(events: Sequence[Event]) -> pd.DataFrame:
        rows = [
            {
                "event_id": e.event_id,
                "country": e.country,
                "kind": e.kind.value,
                "event_period": e.event_period,
                "baseline_period": e.baseline_period,
                "control_rule": e.control_rule.value,
                "treated_deposits": ";".join(e.treated_deposits),
                "treated_tiles": len(e.treated_tiles),
                "control_tiles": len(e.control_tiles),
            }
            for e in events
        ]
        return pd.DataFrame(rows, columns=EVENT_COLUMNS)


stacking_service = StackingService()
