import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.errors import EmptyInputError, InputError, NotEstimableError
from app.core.storage import read_csv
from app.schemas.estimation import FESpec
from app.schemas.geo import FAR_LIMIT_M, Band
from app.schemas.lifecycle import MineStatus
from app.schemas.panel import (
    PANEL_COLUMNS,
    BalanceRegressor,
    BalanceResult,
    BinMean,
    DemeanSummary,
    MismatchReport,
    SizeClass,
)
from app.services.clustering import cluster_vcov, count_clusters
from app.services.estimator_service import estimator_service
from app.services.student_t import t_quantile

logger = logging.getLogger(__name__)

SIZE_LABELS = {
    "small": SizeClass.small,
    "minor": SizeClass.small,
    "moderate": SizeClass.small,
    "large": SizeClass.large,
    "major": SizeClass.large,
    "giant": SizeClass.large,
    "supergiant": SizeClass.large,
}
BIN_COLUMNS = ["status", "bin_km", "period", "mean", "ci_low", "ci_high", "n"]
TRAJECTORY_COLUMNS = ["status", "band", "period", "mean", "ci_low", "ci_high", "n"]
BALANCE_COLUMNS = ["comparison", "covariate", "beta", "se_mine_clustered", "n", "n_clusters", "estimable"]
CATEGORY_COLUMNS = ["near", "far", "large", "small", "democracy", "autocracy"]
HIGH_PREFIX = "high_"


def size_class_of(label) -> Optional[str]:
    if label is None or (isinstance(label, float) and math.isnan(label)) or str(label).strip() == "":
        return None
    key = str(label).strip().lower().replace(" ", "").replace("-", "")
    if key not in SIZE_LABELS:
        raise InputError(f"unknown deposit size class {label!r}")
    return SIZE_LABELS[key].value


def mean_with_ci(values: np.ndarray, clusters: np.ndarray, confidence: float = 0.95) -> Tuple[float, float, float]:
    """Mean and a cluster-robust confidence interval; bounds are NaN with fewer than two clusters"""
    mean = float(values.mean())
    n_groups = count_clusters(clusters)
    if n_groups < 2 or values.size < 2:
        return mean, math.nan, math.nan
    ones = np.ones((values.size, 1))
    var = cluster_vcov(ones, values - mean, clusters)[0, 0]
    half = t_quantile(0.5 + confidence / 2.0, n_groups - 1) * math.sqrt(max(var, 0.0))
    return mean, mean - half, mean + half


class PanelService:
    """Tile x period panel assembly and descriptive analyses"""

    # Country characteristics

    def load_country_meta(self, path: Path) -> pd.DataFrame:
        frame = read_csv(path, required=["country", "polity2"], dtype={"country": str})
        return frame

    def country_table(self, country_meta: pd.DataFrame, start_year: int = 1984, end_year: int = 2019) -> pd.DataFrame:
        """One row per country: democracy flag plus high_<x> dummies for extra numeric columns.

        With a year column, Polity2 and the other measures are averaged over
        the study years.
        """
        meta = country_meta.copy()
        meta["country"] = meta["country"].astype(str).str.strip()
        if "year" in meta.columns:
            meta = meta.loc[meta["year"].between(start_year, end_year)].drop(columns="year")
        numeric = [c for c in meta.columns if c != "country" and pd.api.types.is_numeric_dtype(meta[c])]
        table = meta.groupby("country", sort=True)[numeric].mean().reset_index()
        # Polity2 of exactly 0 counts as autocratic
        table["democracy"] = (table["polity2"] > 0).astype(int)
        for column in numeric:
            if column == "polity2":
                continue
            median = table[column].median()
            table[f"{HIGH_PREFIX}{column}"] = (table[column] > median).astype(int)
        extra = [c for c in table.columns if c.startswith(HIGH_PREFIX)]
        return table.loc[:, ["country", "democracy", *sorted(extra)]]

    # Assembly

    def assemble(
        self,
        assignments: pd.DataFrame,
        statuses: pd.DataFrame,
        outcomes: pd.DataFrame,
        country_meta: pd.DataFrame,
        deposits: pd.DataFrame,
        start_year: int = 1984,
        end_year: int = 2019,
    ) -> Tuple[pd.DataFrame, MismatchReport]:
        """Inner-join assignments with outcomes, statuses, deposits and country traits"""
        for name, frame in (("assignments", assignments), ("outcomes", outcomes)):
            dup = frame.duplicated(["tile_id", "period"])
            if dup.any():
                row = frame.loc[dup].iloc[0]
                raise InputError(f"{name}: duplicate row for tile {row['tile_id']} period {row['period']}")

        confounded = assignments["dropped_confounded"].astype(str).str.lower().isin(["true", "1"])
        kept = assignments.loc[~confounded]

        a_keys = set(zip(kept["tile_id"].astype(str), kept["period"].astype(int)))
        o_keys = set(zip(outcomes["tile_id"].astype(str), outcomes["period"].astype(int)))
        matched = a_keys & o_keys

        left = kept.assign(tile_id=kept["tile_id"].astype(str), period=kept["period"].astype(int))
        right = outcomes.assign(tile_id=outcomes["tile_id"].astype(str), period=outcomes["period"].astype(int))
        right = right.drop(columns=[c for c in ("deposit_id", "band", "distance_m") if c in right.columns])
        panel = left.drop(columns="dropped_confounded").merge(right, on=["tile_id", "period"], how="inner")

        status_cols = statuses.loc[:, ["deposit_id", "status", "event_period", "event_kind", "first_active_year"]]
        n_before = len(panel)
        panel = panel.merge(status_cols, on="deposit_id", how="inner")
        without_status = panel.shape[0] != n_before
        missing_status = len(set(left["deposit_id"]) - set(statuses["deposit_id"]))

        dep_cols = deposits.loc[:, ["deposit_id", "country", "discovery_year", "size_class"]].copy()
        dep_cols["size_class"] = [size_class_of(v) for v in dep_cols["size_class"]]
        panel = panel.merge(dep_cols, on="deposit_id", how="inner")

        countries = self.country_table(country_meta, start_year, end_year)
        missing_meta = sorted(set(panel["country"]) - set(countries["country"]))
        if missing_meta:
            logger.warning("panel: %d countr(ies) without meta dropped: %s", len(missing_meta), ", ".join(missing_meta))
        panel = panel.merge(countries, on="country", how="inner")

        if "conflict_count" not in panel.columns:
            panel["conflict_count"] = np.nan
        counts = pd.to_numeric(panel["conflict_count"], errors="coerce")
        panel["conflict_any"] = (counts >= 1).astype(float).where(counts.notna())
        # Conflict records start after the first period
        first = panel["period"] == 1
        panel.loc[first, ["conflict_count", "conflict_any"]] = np.nan
        for column in ("log_urban", "log_crop", "log_water", "wealth_z"):
            if column not in panel.columns:
                panel[column] = np.nan

        extra = sorted(c for c in panel.columns if c.startswith(HIGH_PREFIX))
        panel = panel.loc[:, PANEL_COLUMNS + extra].sort_values(["tile_id", "period"], kind="mergesort").reset_index(drop=True)

        report = MismatchReport(
            assignment_keys=len(a_keys),
            outcome_keys=len(o_keys),
            matched_keys=len(matched),
            assignments_without_outcome=len(a_keys - o_keys),
            outcomes_without_assignment=len(o_keys - a_keys),
            confounded_dropped=int(confounded.sum()),
            deposits_without_status=missing_status,
            countries_without_meta=len(missing_meta),
        )
        if report.assignments_without_outcome or report.outcomes_without_assignment:
            logger.warning(
                "panel: %d assignment keys without outcomes, %d outcome keys without assignment",
                report.assignments_without_outcome,
                report.outcomes_without_assignment,
            )
        if without_status:
            logger.warning("panel: %d deposit(s) without status dropped", missing_status)
        logger.info("panel: %d rows, %d tiles", len(panel), panel["tile_id"].nunique())
        return panel, report

    @staticmethod
    def add_categories(frame: pd.DataFrame) -> pd.DataFrame:
        """0/1 category columns used by heterogeneity interactions"""
        out = frame.copy()
        out["near"] = (out["band"] == Band.near.value).astype(int)
        out["far"] = (out["band"] == Band.far.value).astype(int)
        out["large"] = (out["size_class"] == SizeClass.large.value).astype(int)
        out["small"] = (out["size_class"] == SizeClass.small.value).astype(int)
        out["democracy"] = out["democracy"].astype(int)
        out["autocracy"] = 1 - out["democracy"]
        return out

    # Descriptives

    def distance_bin_means(
        self,
        panel: pd.DataFrame,
        outcome: str,
        bin_width_m: float = 5000.0,
        periods: Iterable[int] = (1, 12),
        radius_m: float = FAR_LIMIT_M,
    ) -> pd.DataFrame:
        """Outcome means by status, distance bin and period with mine-clustered CIs"""
        if len(panel) == 0:
            raise EmptyInputError("distance bins need a non-empty panel")
        n_bins = int(math.ceil(radius_m / bin_width_m))
        data = panel.loc[panel["period"].isin(list(periods))].copy()
        # Half-open bins; the outer edge joins the last bin
        data["bin"] = np.minimum(np.floor(data["distance_m"] / bin_width_m).astype(int), n_bins - 1)
        data = data.loc[data[outcome].notna()]

        groups = {key: g for key, g in data.groupby(["status", "bin", "period"], sort=True)}
        rows = []
        for status in sorted(panel["status"].unique()):
            for b in range(n_bins):
                for p in sorted(set(periods)):
                    cell = groups.get((status, b, p))
                    bin_km = int(round(b * bin_width_m / 1000))
                    if cell is None or len(cell) == 0:
                        rows.append(BinMean(status=status, bin_km=bin_km, period=p).model_dump())
                        continue
                    mean, low, high = mean_with_ci(cell[outcome].to_numpy(dtype=float), cell["deposit_id"].to_numpy())
                    rows.append(
                        BinMean(
                            status=status,
                            bin_km=bin_km,
                            period=p,
                            mean=mean,
                            ci_low=None if math.isnan(low) else low,
                            ci_high=None if math.isnan(high) else high,
                            n=len(cell),
                        ).model_dump()
                    )
        out = pd.DataFrame(rows, columns=BIN_COLUMNS)
        out["status"] = out["status"].map(lambda s: MineStatus(s).value)
        return out

    def demean_relative(
        self, panel: pd.DataFrame, outcome: str, reference: MineStatus = MineStatus.not_yet_opened
    ) -> Tuple[pd.DataFrame, DemeanSummary]:
        """Outcome relative to the reference group's (country, period) mean.

        Rows in cells without reference observations are dropped and counted.
        The cell mean is kept in reference_mean so the original value can be
        rebuilt.
        """
        data = panel.loc[panel[outcome].notna()]
        reference = MineStatus(reference)
        ref = data.loc[data["status"] == reference.value]
        cell_means = ref.groupby(["country", "period"], sort=True)[outcome].mean().rename("reference_mean").reset_index()
        merged = data.merge(cell_means, on=["country", "period"], how="left")
        lacking = merged["reference_mean"].isna()
        dropped_cells = sorted({f"{c}:{p}" for c, p in zip(merged.loc[lacking, "country"], merged.loc[lacking, "period"])})
        if lacking.any():
            logger.warning("demean %s: %d row(s) in %d cell(s) without reference observations dropped", outcome, int(lacking.sum()), len(dropped_cells))
        out = merged.loc[~lacking].copy()
        out["relative"] = out[outcome] - out["reference_mean"]
        out = out.sort_values(["tile_id", "period"], kind="mergesort").reset_index(drop=True)
        return out, DemeanSummary(kept_rows=len(out), dropped_rows=int(lacking.sum()), reference=reference, cells=dropped_cells)

    def relative_trajectories(
        self, panel: pd.DataFrame, outcome: str, reference: MineStatus = MineStatus.not_yet_opened
    ) -> pd.DataFrame:
        """Mean demeaned outcome by status, band and period"""
        relative, _ = self.demean_relative(panel, outcome, reference)
        rows = []
        for (status, band, period), cell in relative.groupby(["status", "band", "period"], sort=True):
            mean, low, high = mean_with_ci(cell["relative"].to_numpy(dtype=float), cell["deposit_id"].to_numpy())
            rows.append(
                {"status": status, "band": band, "period": int(period), "mean": mean, "ci_low": low, "ci_high": high, "n": len(cell)}
            )
        return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)

    # Balancing

    def balance_sample(
        self,
        panel: pd.DataFrame,
        treated: MineStatus,
        control: MineStatus,
        tile_covariates: Optional[pd.DataFrame] = None,
    ) -> pd.DataFrame:
        """Period-1 cross-section of treated and control tiles with group_dummy"""
        first = panel.loc[(panel["period"] == 1) & panel["status"].isin([MineStatus(treated).value, MineStatus(control).value])].copy()
        first["group_dummy"] = (first["status"] == MineStatus(treated).value).astype(int)
        return self._with_covariates(first, tile_covariates)

    def opening_year_sample(self, panel: pd.DataFrame, tile_covariates: Optional[pd.DataFrame] = None) -> pd.DataFrame:
        """Opening tiles in period 1 with the log of their first active year"""
        first = panel.loc[(panel["period"] == 1) & (panel["status"] == MineStatus.opening.value)].copy()
        first = first.loc[first["first_active_year"].notna()]
        first["log_opening_year"] = np.log(first["first_active_year"].astype(float))
        return self._with_covariates(first, tile_covariates)

    @staticmethod
    def _with_covariates(frame: pd.DataFrame, tile_covariates: Optional[pd.DataFrame]) -> pd.DataFrame:
        if tile_covariates is None:
            return frame
        covariates = tile_covariates.copy()
        covariates["tile_id"] = covariates["tile_id"].astype(str)
        overlap = [c for c in covariates.columns if c != "tile_id" and c in frame.columns]
        return frame.merge(covariates.drop(columns=overlap), on="tile_id", how="left")

    def balance_test(
        self, cross_section: pd.DataFrame, regressor: BalanceRegressor, covariates: Sequence[str]
    ) -> List[BalanceResult]:
        """Covariate on regressor with country fixed effects, SEs clustered by mine"""
        regressor = BalanceRegressor(regressor)
        results = []
        for covariate in covariates:
            data = cross_section.loc[cross_section[covariate].notna() & cross_section[regressor.value].notna()]
            n = len(data)
            try:
                fit = estimator_service.fit(data, covariate, [regressor.value], FESpec(dimensions=[("country",)]), ["deposit_id"])
            except NotEstimableError as e:
                logger.info("balance %s: not estimable (%s)", covariate, e.detail)
                results.append(BalanceResult(covariate=covariate, n=n, n_clusters=count_clusters(data["deposit_id"].to_numpy()) if n else 0, estimable=False))
                continue
            beta = fit.beta[0]
            if math.isnan(beta):
                results.append(BalanceResult(covariate=covariate, n=n, n_clusters=fit.n_clusters["deposit_id"], estimable=False))
                continue
            results.append(
                BalanceResult(
                    covariate=covariate,
                    beta=beta,
                    se_mine_clustered=fit.se[0],
                    n=fit.n_obs,
                    n_clusters=fit.n_clusters["deposit_id"],
                )
            )
        return results

    @staticmethod
    def balance_frame(comparison: str, results: Sequence[BalanceResult]) -> pd.DataFrame:
        rows = [{"comparison": comparison, **r.model_dump()} for r in results]
        return pd.DataFrame(rows, columns=BALANCE_COLUMNS)


panel_service = PanelService()
