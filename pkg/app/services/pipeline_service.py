import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import pandas as pd

from app.core.errors import ConfigError, EmptyInputError, InputError, NotEstimableError, OrePanelError
from app.core.storage import ArtifactStore, read_csv
from app.schemas.estimation import ESTIMATE_COLUMNS, Design
from app.schemas.lifecycle import EventKind, MineStatus
from app.schemas.panel import BalanceRegressor
from app.schemas.run import Analysis, RunConfig, SpecificationEntry
from app.services.estimator_service import estimator_service
from app.services.geo_service import ASSIGNMENT_COLUMNS, TILE_COLUMNS, geo_service
from app.services.lifecycle_service import STATUS_COLUMNS, lifecycle_service
from app.services.panel_service import panel_service
from app.services.raster_service import RAW_OUTCOME_COLUMNS, raster_service
from app.services.screening_service import REPORT_COLUMNS, screening_service
from app.services.stacking_service import EVENT_COLUMNS, stacking_service
from app.services.synth_service import synth_service

logger = logging.getLogger(__name__)

STAGES = ["grid", "classify", "ingest", "screen", "panel", "stack", "estimate", "describe"]
COMMANDS = STAGES + ["synth", "all"]

TEXT_KEYS = {"tile_id": str, "deposit_id": str, "country": str}
BALANCE_COMPARISONS = [
    ("opening_vs_not_yet", MineStatus.opening, MineStatus.not_yet_opened),
    ("closing_vs_not_yet", MineStatus.closing, MineStatus.not_yet_opened),
    ("closing_vs_continuous", MineStatus.closing, MineStatus.continuous),
]
BALANCE_OUTCOMES = ["log_urban", "log_crop", "wealth_z"]
# Per-specification failures that leave the rest of the run usable
SKIPPABLE = (NotEstimableError, EmptyInputError)


class PipelineService:
    """Runs pipeline stages against a RunConfig and records them in the manifest"""

    def run(self, command: str, config: RunConfig) -> List[str]:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        store = ArtifactStore(config.output_dir)
        if command == "synth":
            self._execute(store, "synth", config)
            store.begin_run(config.payload(), self._inputs(config))
            return ["synth"]

        stages = STAGES if command == "all" else [command]
        store.begin_run(config.payload(), self._inputs(config))
        for stage in stages:
            self._execute(store, stage, config)
        return stages

    def _execute(self, store: ArtifactStore, stage: str, config: RunConfig) -> None:
        handler: Callable[[RunConfig, ArtifactStore], None] = getattr(self, stage)
        logger.info("stage %s: start", stage)
        try:
            handler(config, store)
        except OrePanelError as e:
            store.mark_stage(stage, "failed", e.detail)
            logger.error("stage %s failed: %s", stage, e.detail)
            raise
        store.mark_stage(stage, "completed")
        logger.info("stage %s: completed", stage)

    @staticmethod
    def _inputs(config: RunConfig) -> List[Path]:
        keys = ("deposits", "country_meta", "outcomes", "masks_dir", "tile_measures", "tile_covariates")
        return [Path(getattr(config, k)) for k in keys if getattr(config, k) is not None]

    @staticmethod
    def _artifact(store: ArtifactStore, name: str, producer: str, dtype: Optional[Dict[str, type]] = None) -> pd.DataFrame:
        if not store.exists(name):
            raise InputError(f"{store.path(name)} not found; run the {producer} stage first")
        return store.read_frame(name, dtype=dtype or TEXT_KEYS)

    # Stages

    def grid(self, config: RunConfig, store: ArtifactStore) -> None:
        config.check_inputs(["deposits"])
        deposits = geo_service.load_deposits(config.deposits)
        # Statuses feed the confounding flags of each assignment
        statuses = lifecycle_service.classify_deposits(deposits, config.calendar)
        tiles = geo_service.grid_frame(deposits, config.projection, config.tile_size_m, config.radius_m)
        periods = range(1, config.n_periods + 1)
        assignments = geo_service.assign_frame(tiles, deposits, statuses, periods, config.projection, config.radius_m)
        store.write_frame("tiles.csv", tiles, TILE_COLUMNS, ["ix", "iy"])
        store.write_frame("assignments.csv", assignments, ASSIGNMENT_COLUMNS, ["tile_id", "period"])

    def classify(self, config: RunConfig, store: ArtifactStore) -> None:
        config.check_inputs(["deposits"])
        deposits = geo_service.load_deposits(config.deposits)
        statuses = lifecycle_service.classify_deposits(deposits, config.calendar)
        store.write_frame("statuses.csv", statuses, STATUS_COLUMNS, ["deposit_id"])

    def ingest(self, config: RunConfig, store: ArtifactStore) -> None:
        if config.masks_dir is not None:
            keys = ["masks_dir"] + (["tile_measures"] if config.tile_measures is not None else [])
            config.check_inputs(keys)
            outcomes = raster_service.ingest_masks(config.masks_dir, config.tile_measures, config.log_zero_policy)
        elif config.outcomes is not None:
            config.check_inputs(["outcomes"])
            outcomes = raster_service.ingest_outcomes(config.outcomes)
        else:
            raise ConfigError("ingest needs either masks_dir or outcomes in the config")
        store.write_frame("outcomes_raw.csv", outcomes, RAW_OUTCOME_COLUMNS, ["tile_id", "period"])

    def screen(self, config: RunConfig, store: ArtifactStore) -> None:
        raw = raster_service.normalize_outcomes(self._artifact(store, "outcomes_raw.csv", "ingest"))
        cleaned, reports = screening_service.screen_outcomes(raw, config.screening)
        store.write_frame("outcomes.csv", cleaned, RAW_OUTCOME_COLUMNS, ["tile_id", "period"])
        store.write_frame("outlier_report.csv", screening_service.report_frame(reports), REPORT_COLUMNS)

    def panel(self, config: RunConfig, store: ArtifactStore) -> None:
        config.check_inputs(["deposits", "country_meta"])
        assignments = self._artifact(store, "assignments.csv", "grid")
        statuses = self._artifact(store, "statuses.csv", "classify")
        outcomes = self._artifact(store, "outcomes.csv", "screen")
        # Deposits carry the size class and opening year
        deposits = geo_service.load_deposits(config.deposits)
        country_meta = panel_service.load_country_meta(config.country_meta)
        calendar = config.calendar
        panel, report = panel_service.assemble(
            assignments, statuses, outcomes, country_meta, deposits, calendar.start_year, calendar.end_year
        )
        store.write_frame("panel.csv", panel, list(panel.columns), ["tile_id", "period"])
        store.write_frame("panel_mismatch.csv", pd.DataFrame([report.model_dump()]))

    def _load_panel(self, store: ArtifactStore) -> pd.DataFrame:
        panel = self._artifact(store, "panel.csv", "panel")
        if len(panel) == 0:
            raise EmptyInputError("panel.csv has no rows")
        return panel

    def _sample(self, panel: pd.DataFrame, spec: SpecificationEntry, config: RunConfig) -> pd.DataFrame:
        """Panel rows eligible for a specification"""
        if not spec.restrict_recent:
            return panel
        deposits = panel.loc[:, ["deposit_id", "discovery_year"]].drop_duplicates("deposit_id")
        recent, _ = lifecycle_service.restrict_recent_discoveries(deposits, config.calendar)
        return panel.loc[panel["deposit_id"].isin(set(recent["deposit_id"]))]

    def dataset(self, panel: pd.DataFrame, spec: SpecificationEntry, config: RunConfig) -> Tuple[pd.DataFrame, Optional[pd.DataFrame]]:
        """Estimation data for a specification, plus its events table for stacked designs"""
        sample = self._sample(panel, spec, config)
        if spec.design == Design.ordinary:
            control = MineStatus(spec.control_rule.value)
            return stacking_service.ordinary_panel(sample, spec.kind, control, spec.centered), None
        events, no_controls = stacking_service.build_event_set(sample, spec.kind, spec.control_rule, config.window)
        if spec.kind == EventKind.closing and spec.centered:
            events = stacking_service.center_closing(events)
        stacked, summary = stacking_service.stack(sample, events, config.window, spec.balanced, config.n_periods, no_controls)
        if summary.events_kept == 0:
            raise EmptyInputError(f"{spec.name}: no events left after the balanced-window filter")
        return stacked, stacking_service.events_frame(events)

    def stack(self, config: RunConfig, store: ArtifactStore) -> None:
        panel = self._load_panel(store)
        for spec in config.specifications:
            if spec.design != Design.stacked:
                continue
            try:
                stacked, events = self.dataset(panel, spec, config)
            except SKIPPABLE as e:
                logger.warning("stack %s skipped: %s", spec.name, e.detail)
                continue
            store.write_frame(f"stacked_{spec.name}.csv", stacked)
            store.write_frame(f"events_{spec.name}.csv", events, EVENT_COLUMNS, ["event_id"])

    def _estimate_one(self, panel: pd.DataFrame, spec: SpecificationEntry, config: RunConfig, store: ArtifactStore) -> pd.DataFrame:
        data, _ = self.dataset(panel, spec, config)
        if spec.analysis == Analysis.event_study:
            result = estimator_service.event_study(data, config.window, spec.outcome, spec.band)
            store.write_frame(f"event_study_{spec.name}.csv", estimator_service.event_study_frame(result))
            return estimator_service.result_rows(spec.name, spec.outcome, result.regression)
        if spec.analysis == Analysis.lpm_conflict:
            result = estimator_service.lpm_conflict(data, spec.split, spec.band, spec.design)
            return estimator_service.result_rows(spec.name, spec.outcome, result)
        result = estimator_service.did(data, spec.design, spec.resolved_interactions(), spec.outcome, spec.band)
        return estimator_service.result_rows(spec.name, spec.outcome, result)

    def estimate(self, config: RunConfig, store: ArtifactStore) -> None:
        panel = self._load_panel(store)
        frames = []
        skipped = []
        for spec in config.specifications:
            try:
                frames.append(self._estimate_one(panel, spec, config, store))
            except SKIPPABLE as e:
                logger.warning("estimate %s skipped: %s", spec.name, e.detail)
                skipped.append(spec.name)
        if config.specifications and not frames:
            raise NotEstimableError(f"no specification could be estimated ({', '.join(skipped)})")
        estimates = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=ESTIMATE_COLUMNS)
        store.write_frame("estimates.csv", estimates, ESTIMATE_COLUMNS)

    def describe(self, config: RunConfig, store: ArtifactStore) -> None:
        panel = self._load_panel(store)
        for outcome in config.describe_outcomes:
            if outcome not in panel.columns:
                raise ConfigError(f"describe_outcomes: unknown outcome {outcome!r}")
            bins = panel_service.distance_bin_means(panel, outcome, config.bin_width_m, config.bin_periods, config.radius_m)
            store.write_frame(f"distance_bins_{outcome}.csv", bins)
            store.write_frame(f"relative_{outcome}.csv", panel_service.relative_trajectories(panel, outcome))

        covariates_frame = None
        if config.tile_covariates is not None:
            config.check_inputs(["tile_covariates"])
            covariates_frame = read_csv(config.tile_covariates, required=["tile_id"], dtype={"tile_id": str})
        extra = [c for c in (covariates_frame.columns if covariates_frame is not None else []) if c != "tile_id"]
        covariates = BALANCE_OUTCOMES + extra

        frames = []
        for name, treated, control in BALANCE_COMPARISONS:
            sample = panel_service.balance_sample(panel, treated, control, covariates_frame)
            if sample["group_dummy"].nunique() < 2:
                logger.warning("balance %s skipped: one of the groups is empty", name)
                continue
            results = panel_service.balance_test(sample, BalanceRegressor.group_dummy, covariates)
            frames.append(panel_service.balance_frame(name, results))
        early_late = panel_service.opening_year_sample(panel, covariates_frame)
        if len(early_late):
            results = panel_service.balance_test(early_late, BalanceRegressor.log_opening_year, covariates)
            frames.append(panel_service.balance_frame("opening_year", results))
        if frames:
            store.write_frame("balance.csv", pd.concat(frames, ignore_index=True))

    def synth(self, config: RunConfig, store: ArtifactStore) -> None:
        if config.outcomes is None and not (config.synth.write_masks and config.masks_dir is not None):
            raise ConfigError("synth needs an outcomes path, or write_masks with a masks_dir")
        bundle = synth_service.generate(
            config.synth, config.calendar, config.projection, config.tile_size_m, config.radius_m
        )
        synth_service.write(
            bundle,
            deposits=config.deposits,
            country_meta=config.country_meta,
            outcomes=config.outcomes,
            tile_measures=config.tile_measures,
            masks_dir=config.masks_dir if config.synth.write_masks else None,
            tile_covariates=config.tile_covariates,
        )
        store.write_frame("ground_truth.csv", pd.DataFrame(bundle.ground_truth.rows()), ["kind", "key", "value"])


pipeline_service = PipelineService()
