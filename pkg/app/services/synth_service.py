import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.errors import ConfigError, NotEstimableError
from app.core.storage import write_csv
from app.schemas.geo import Band, ProjectionParams
from app.schemas.lifecycle import ACTIVE_STATUSES, MineStatus, PeriodCalendar
from app.schemas.raster import MASK_SIZE, LandClass, Mask, MaskKind
from app.schemas.synth import GroundTruth, SynthConfig
from app.services.geo_service import DEPOSIT_COLUMNS, geo_service
from app.services.lifecycle_service import lifecycle_service
from app.services.raster_service import mask_filename, raster_service

logger = logging.getLogger(__name__)

STREAMS = ("placement", "lifecycle", "shocks", "noise", "conflict", "masks", "covariates")
OUTCOME_FILE_COLUMNS = ["tile_id", "period", "log_urban", "log_crop", "log_water", "wealth", "conflict_count"]
MEASURE_COLUMNS = ["tile_id", "period", "wealth", "conflict_count"]
COUNTRY_COLUMNS = ["country", "polity2", "gdp_pc"]
COVARIATE_COLUMNS = ["tile_id", "elevation_m", "ruggedness"]
GROUND_TRUTH_COLUMNS = ["kind", "key", "value"]

# Upper bounds keeping emitted mask shares below one in total
MASK_SHARE_CAP = {LandClass.urban: 0.55, LandClass.cropland: 0.35, LandClass.water: 0.05}


@dataclass
class SynthBundle:
    deposits: pd.DataFrame
    country_meta: pd.DataFrame
    outcomes: pd.DataFrame
    tile_measures: pd.DataFrame
    tile_covariates: pd.DataFrame
    ground_truth: GroundTruth
    statuses: pd.DataFrame
    assignments: pd.DataFrame
    masks: Dict[str, Mask] = field(default_factory=dict)


class SynthService:
    """Seeded generator of deposits, outcomes and conflict with known effects"""

    @staticmethod
    def validate(payload: dict) -> SynthConfig:
        try:
            return SynthConfig.model_validate(payload)
        except ValidationError as e:
            first = e.errors()[0]
            key = ".".join(str(p) for p in first.get("loc", ())) or "synth"
            raise ConfigError(f"synth config: {key}: {first.get('msg')}")

    @staticmethod
    def _streams(seed: int) -> Dict[str, np.random.Generator]:
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}

    def _countries(self, config: SynthConfig, rng: np.random.Generator) -> pd.DataFrame:
        names = [f"C{k + 1:02d}" for k in range(config.n_countries)]
        n_dem = int(round(config.democracy_share * config.n_countries))
        regime = np.zeros(config.n_countries, dtype=bool)
        regime[rng.permutation(config.n_countries)[:n_dem]] = True
        polity = np.where(regime, rng.uniform(1.0, 9.0, config.n_countries), rng.uniform(-9.0, -1.0, config.n_countries))
        gdp = rng.lognormal(8.0, 0.5, config.n_countries)
        return pd.DataFrame({"country": names, "polity2": np.round(polity, 2), "gdp_pc": np.round(gdp, 1)})

    def _status_labels(self, config: SynthConfig, n: int, rng: np.random.Generator) -> List[MineStatus]:
        counts = []
        remaining = n
        for status, share in (
            (MineStatus.opening, config.share_opening),
            (MineStatus.closing, config.share_closing),
            (MineStatus.continuous, config.share_continuous),
            (MineStatus.not_yet_opened, config.share_not_yet),
        ):
            k = min(int(round(share * n)), remaining)
            counts.append((status, k))
            remaining -= k
        counts.append((MineStatus.no_longer_active, remaining))
        labels = [status for status, k in counts for _ in range(k)]
        return [labels[i] for i in rng.permutation(n)]

    def _history(self, status: MineStatus, config: SynthConfig, calendar: PeriodCalendar, rng: np.random.Generator):
        """Activity interval text and discovery year for one deposit"""
        first, last = calendar.start_year, calendar.end_year
        length = calendar.period_length
        if status == MineStatus.continuous:
            start = first - int(rng.integers(1, 21))
            return f"{start}-{last}", start - int(rng.integers(0, 11))
        if status == MineStatus.opening:
            lo, hi = config.opening_periods
            period = int(rng.integers(lo, hi + 1))
            start = calendar.first_year(period) + int(rng.integers(0, length))
            return f"{start}-{last}", int(rng.integers(first, start + 1))
        if status == MineStatus.closing:
            lo, hi = config.closing_periods
            period = int(rng.integers(lo, hi + 1))
            start = first - int(rng.integers(1, 21))
            end = calendar.first_year(period) + int(rng.integers(0, length))
            return f"{start}-{end}", start - int(rng.integers(0, 11))
        if status == MineStatus.not_yet_opened:
            if rng.random() < config.share_old_discovery:
                return "", int(rng.integers(1950, first))
            return "", int(rng.integers(first, last - 3))
        end = first - int(rng.integers(1, 11))
        start = end - int(rng.integers(5, 21))
        return f"{start}-{end}", start - int(rng.integers(0, 11))

    def _deposits(
        self, config: SynthConfig, countries: pd.DataFrame, params: ProjectionParams, calendar: PeriodCalendar, streams
    ) -> pd.DataFrame:
        placement, lifecycle = streams["placement"], streams["lifecycle"]
        per = config.deposits_per_country
        cols = int(math.ceil(math.sqrt(per)))
        rows_ = int(math.ceil(per / cols))
        spacing = config.deposit_spacing_deg
        block = (cols + 2) * spacing
        records = []
        for k, country in enumerate(countries["country"]):
            lon0 = params.central_meridian_deg + (k - (config.n_countries - 1) / 2.0) * block - (cols - 1) * spacing / 2.0
            lat0 = -(rows_ - 1) * spacing / 2.0
            jitter = placement.uniform(-0.15 * spacing, 0.15 * spacing, size=(per, 2))
            statuses = self._status_labels(config, per, lifecycle)
            for j in range(per):
                lat = lat0 + (j // cols) * spacing + jitter[j, 0]
                lon = lon0 + (j % cols) * spacing + jitter[j, 1]
                if not (-90.0 < lat < 90.0 and -180.0 <= lon <= 180.0):
                    raise ConfigError("synthetic deposits do not fit on the globe; lower n_countries or deposit_spacing_deg")
                intervals, discovered = self._history(statuses[j], config, calendar, lifecycle)
                large = lifecycle.random() < config.share_large
                size = ("Major", "Giant")[int(lifecycle.integers(0, 2))] if large else ("Minor", "Moderate")[int(lifecycle.integers(0, 2))]
                records.append(
                    {
                        "deposit_id": f"{country}_{j + 1:03d}",
                        "lat": round(lat, 6),
                        "lon": round(lon, 6),
                        "country": country,
                        "discovery_year": discovered,
                        "size_class": size,
                        "activity_intervals": intervals,
                    }
                )
        return pd.DataFrame(records, columns=DEPOSIT_COLUMNS)

    def generate(
        self,
        config: SynthConfig,
        calendar: PeriodCalendar = PeriodCalendar(),
        params: ProjectionParams = ProjectionParams(),
        tile_size_m: float = 6720.0,
        radius_m: float = 40_000.0,
    ) -> SynthBundle:
        """Build the synthetic inputs; the same seed always gives the same frames"""
        streams = self._streams(config.seed)
        n_periods = calendar.n_periods
        countries = self._countries(config, streams["placement"])
        deposits = geo_service.normalize_deposits(self._deposits(config, countries, params, calendar, streams))
        statuses = lifecycle_service.classify_deposits(deposits, calendar)
        records = {
            d: lifecycle_service.classify(d, "" if pd.isna(text) else str(text), None, calendar)
            for d, text in zip(deposits["deposit_id"], deposits["activity_intervals"])
        }
        tiles = geo_service.grid_frame(deposits, params, tile_size_m, radius_m)
        assigned = geo_service.nearest_assignment(tiles, deposits, statuses, params, radius_m)
        assigned = assigned.sort_values("tile_id", kind="mergesort").reset_index(drop=True)
        n_tiles = len(assigned)

        dep = deposits.set_index("deposit_id")
        stat = statuses.set_index("deposit_id")
        democracy = dict(zip(countries["country"], countries["polity2"] > 0))
        country_index = {c: i for i, c in enumerate(countries["country"])}
        tile_country = dep.loc[assigned["deposit_id"], "country"].to_numpy()
        tile_status = stat.loc[assigned["deposit_id"], "status"].to_numpy()
        tile_event = stat.loc[assigned["deposit_id"], "event_period"].astype("float64").to_numpy()
        near = (assigned["band"] == Band.near.value).to_numpy()
        autocracy = ~np.array([democracy[c] for c in tile_country], dtype=bool)

        periods = np.arange(1, n_periods + 1)
        opening = tile_status == MineStatus.opening.value
        closing = tile_status == MineStatus.closing.value
        baseline = np.where(opening, tile_event - 1, np.where(closing, tile_event, np.nan))
        rel = periods[None, :] - baseline[:, None]
        post_open = opening[:, None] & (rel >= 1)
        post_close = closing[:, None] & (rel >= 1)
        band_factor = np.where(near, 1.0, config.far_effect_ratio)[:, None]

        effect = np.zeros((n_tiles, n_periods))
        for t in np.unique(rel[opening]):
            cells = opening[:, None] & (rel == t)
            effect[cells] = config.effect_at(int(t)) + config.pre_trend * t
        effect = effect * band_factor + config.att_closing * post_close * band_factor

        shocks = streams["shocks"]
        tile_urban = shocks.normal(0.0, config.tile_sd, n_tiles)
        tile_crop = shocks.normal(0.0, config.tile_sd, n_tiles)
        tile_wealth = shocks.normal(0.0, 1.0, n_tiles)
        country_shock = shocks.normal(0.0, config.shock_sd, (config.n_countries, n_periods))
        trend = 0.03 * (periods - 1)
        cidx = np.array([country_index[c] for c in tile_country], dtype=int)
        common = country_shock[cidx] + trend[None, :]

        noise = streams["noise"]
        shape = (n_tiles, n_periods)
        log_urban = config.base_log_urban + tile_urban[:, None] + common + effect + noise.normal(0.0, config.noise_sd, shape)
        log_crop = (
            config.base_log_crop + tile_crop[:, None] + common + config.att_crop * post_open + noise.normal(0.0, config.noise_sd, shape)
        )
        wealth = tile_wealth[:, None] + common + config.att_wealth * post_open + noise.normal(0.0, config.noise_sd, shape)
        log_water = math.log(0.01) + noise.normal(0.0, 0.1, shape)

        conflict = streams["conflict"]
        uplift = np.where(autocracy, config.conflict_treat_uplift_autocracy, config.conflict_treat_uplift_democracy)
        p_conflict = config.conflict_base_p + uplift[:, None] * post_open
        hit = conflict.random(shape) < p_conflict
        extra = conflict.poisson(0.2, shape)
        conflict_count = (hit * (1 + extra)).astype(int)

        masks: Dict[str, Mask] = {}
        if config.write_masks:
            log_urban, log_crop, log_water = self._masks(
                config, assigned, tile_status, records, log_urban, log_crop, log_water, near, streams["masks"], masks
            )

        tile_ids = np.repeat(assigned["tile_id"].to_numpy(), n_periods)
        period_col = np.tile(periods, n_tiles)
        outcomes = pd.DataFrame(
            {
                "tile_id": tile_ids,
                "period": period_col,
                "log_urban": log_urban.ravel(),
                "log_crop": log_crop.ravel(),
                "log_water": log_water.ravel(),
                "wealth": wealth.ravel(),
                "conflict_count": conflict_count.ravel(),
            }
        ).sort_values(["tile_id", "period"], kind="mergesort").reset_index(drop=True)

        cov = streams["covariates"]
        covariates = pd.DataFrame(
            {
                "tile_id": assigned["tile_id"].to_numpy(),
                "elevation_m": np.round(cov.normal(800.0, 300.0, n_tiles), 3),
                "ruggedness": np.round(np.abs(cov.normal(0.0, 1.0, n_tiles)), 6),
            }
        )

        profile = {t: config.effect_at(t) + config.pre_trend * t for t in range(-(n_periods - 1), n_periods) if t != 0}
        truth = GroundTruth(
            event_periods={
                d: (None if pd.isna(p) else int(p)) for d, p in zip(statuses["deposit_id"], statuses["event_period"])
            },
            att={
                "log_urban": config.att_urban,
                "log_crop": config.att_crop,
                "wealth": config.att_wealth,
                "closing_log_urban": config.att_closing,
            },
            profile=profile,
            conflict_uplift_autocracy=config.conflict_treat_uplift_autocracy,
            conflict_uplift_democracy=config.conflict_treat_uplift_democracy,
        )
        logger.info(
            "synth seed %d: %d deposits, %d tiles, %d outcome rows", config.seed, len(deposits), n_tiles, len(outcomes)
        )
        return SynthBundle(
            deposits=deposits,
            country_meta=countries,
            outcomes=outcomes,
            tile_measures=outcomes.loc[:, MEASURE_COLUMNS].copy(),
            tile_covariates=covariates,
            ground_truth=truth,
            statuses=statuses,
            assignments=assigned,
            masks=masks,
        )

    def _masks(self, config, assigned, tile_status, records, log_urban, log_crop, log_water, near, rng, masks):
        """Emit landuse/mine masks and return the log shares they imply"""
        n_pixels = MASK_SIZE * MASK_SIZE
        n_tiles, n_periods = log_urban.shape
        out_u, out_c, out_w = (np.empty_like(log_urban) for _ in range(3))
        for i, (tile_id, deposit_id) in enumerate(zip(assigned["tile_id"], assigned["deposit_id"])):
            active = set(records[deposit_id].active_periods) if MineStatus(tile_status[i]) in ACTIVE_STATUSES else set()
            for j in range(n_periods):
                period = j + 1
                n_mine = int(round(config.mine_pixel_share * n_pixels)) if near[i] and period in active else 0
                valid = n_pixels - n_mine
                counts = {
                    LandClass.urban: int(round(min(math.exp(log_urban[i, j]), MASK_SHARE_CAP[LandClass.urban]) * valid)),
                    LandClass.cropland: int(round(min(math.exp(log_crop[i, j]), MASK_SHARE_CAP[LandClass.cropland]) * valid)),
                    LandClass.water: int(round(min(math.exp(log_water[i, j]), MASK_SHARE_CAP[LandClass.water]) * valid)),
                }
                order = rng.permutation(n_pixels)
                landuse = np.full(n_pixels, int(LandClass.other), dtype=np.uint8)
                mine = np.zeros(n_pixels, dtype=np.uint8)
                mine[order[:n_mine]] = 1
                # Built-up mine area; excluded from the shares
                landuse[order[:n_mine]] = int(LandClass.urban)
                cursor = n_mine
                for cls in (LandClass.urban, LandClass.cropland, LandClass.water):
                    landuse[order[cursor : cursor + counts[cls]]] = int(cls)
                    cursor += counts[cls]
                masks[mask_filename(tile_id, period, MaskKind.landuse)] = Mask(
                    kind=MaskKind.landuse, pixels=landuse.reshape(MASK_SIZE, MASK_SIZE)
                )
                if n_mine:
                    masks[mask_filename(tile_id, period, MaskKind.mine)] = Mask(
                        kind=MaskKind.mine, pixels=mine.reshape(MASK_SIZE, MASK_SIZE)
                    )
                out_u[i, j] = raster_service.log_share(counts[LandClass.urban], valid)
                out_c[i, j] = raster_service.log_share(counts[LandClass.cropland], valid)
                out_w[i, j] = raster_service.log_share(counts[LandClass.water], valid)
        return out_u, out_c, out_w

    def write(
        self,
        bundle: SynthBundle,
        deposits: Path,
        country_meta: Path,
        outcomes: Optional[Path] = None,
        tile_measures: Optional[Path] = None,
        masks_dir: Optional[Path] = None,
        tile_covariates: Optional[Path] = None,
        ground_truth: Optional[Path] = None,
    ) -> List[Path]:
        """Write the bundle in the ingestion formats"""
        written = []
        write_csv(deposits, bundle.deposits, DEPOSIT_COLUMNS, ["deposit_id"])
        written.append(Path(deposits))
        write_csv(country_meta, bundle.country_meta, COUNTRY_COLUMNS, ["country"])
        written.append(Path(country_meta))
        if outcomes is not None:
            write_csv(outcomes, bundle.outcomes, OUTCOME_FILE_COLUMNS, ["tile_id", "period"])
            written.append(Path(outcomes))
        if tile_measures is not None:
            write_csv(tile_measures, bundle.tile_measures, MEASURE_COLUMNS, ["tile_id", "period"])
            written.append(Path(tile_measures))
        if tile_covariates is not None:
            write_csv(tile_covariates, bundle.tile_covariates, COVARIATE_COLUMNS, ["tile_id"])
            written.append(Path(tile_covariates))
        if ground_truth is not None:
            write_csv(ground_truth, pd.DataFrame(bundle.ground_truth.rows(), columns=GROUND_TRUTH_COLUMNS))
            written.append(Path(ground_truth))
        if masks_dir is not None and bundle.masks:
            masks_dir = Path(masks_dir)
            for name in sorted(bundle.masks):
                raster_service.write_mask(masks_dir / name, bundle.masks[name])
            written.append(masks_dir)
        logger.info("synth wrote %d artifact(s)", len(written))
        return written

    @staticmethod
    def oracle_did(
        panel_slice: pd.DataFrame, outcome: str, group_col: str = "treat_group", post_col: Optional[str] = None
    ) -> float:
        """(treated post - treated pre) - (control post - control pre) of cell means"""
        if post_col is None:
            post = panel_slice["post"] if "post" in panel_slice.columns else panel_slice["rel_time"] >= 1
        else:
            post = panel_slice[post_col]
        post = post.astype(bool)
        group = panel_slice[group_col].astype(int) == 1
        values = panel_slice[outcome]
        cells = {}
        for name, selector in (
            ("treat_post", group & post),
            ("treat_pre", group & ~post),
            ("ctrl_post", ~group & post),
            ("ctrl_pre", ~group & ~post),
        ):
            cell = values.loc[selector].dropna()
            if len(cell) == 0:
                raise NotEstimableError(f"oracle DiD cell {name} is empty")
            cells[name] = float(cell.mean())
        return (cells["treat_post"] - cells["treat_pre"]) - (cells["ctrl_post"] - cells["ctrl_pre"])


synth_service = SynthService()
