import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.deps import parallel_map
from app.core.errors import DegenerateDataError, InputError
from app.schemas.screening import EsdResult, EsdStep, OutlierReport, ScreeningOptions, ScreeningPool
from app.services.raster_service import raster_service
from app.services.student_t import t_quantile

logger = logging.getLogger(__name__)

SCREENED_OUTCOMES = ["log_urban", "log_crop", "wealth"]
REPORT_COLUMNS = ["outcome", "pool", "iteration", "R_i", "lambda_i", "removed_id", "confirmed"]


class ScreeningService:
    """Two-stage outlier screening: interquartile fences, then the generalized ESD test"""

    @staticmethod
    def iqr_flag(values: Sequence[float], k: float = 2.0) -> List[int]:
        """Positions outside [Q1 - k*IQR, Q3 + k*IQR]"""
        arr = np.asarray(values, dtype=float)
        if arr.size < 4 or not np.isfinite(arr).all():
            raise DegenerateDataError(f"IQR screening needs at least 4 finite values, got {arr.size}")
        q1, q3 = np.percentile(arr, [25, 75], method="linear")
        spread = q3 - q1
        flagged = (arr < q1 - k * spread) | (arr > q3 + k * spread)
        return [int(i) for i in np.flatnonzero(flagged)]

    @staticmethod
    def critical_value(n: int, i: int, alpha: float = 0.10) -> float:
        """lambda_i for the i-th removal out of n observations"""
        p = 1.0 - alpha / (2.0 * (n - i + 1))
        df = n - i - 1
        t = t_quantile(p, df)
        return (n - i) * t / math.sqrt((df + t * t) * (n - i + 1))

    def esd_test(self, values: Sequence[float], max_outliers: int, alpha: float = 0.10) -> EsdResult:
        arr = np.asarray(values, dtype=float)
        n = arr.size
        if max_outliers < 1:
            raise ValueError("max_outliers must be at least 1")
        if n < max_outliers + 2:
            raise DegenerateDataError(f"ESD needs n >= max_outliers + 2, got n={n}, max_outliers={max_outliers}")

        remaining = np.arange(n)
        steps: List[EsdStep] = []
        for i in range(1, max_outliers + 1):
            sample = arr[remaining]
            sd = sample.std(ddof=1)
            if sd == 0 or not np.isfinite(sd):
                logger.debug("ESD stopped at iteration %d: zero variance", i)
                break
            deviations = np.abs(sample - sample.mean()) / sd
            j = int(np.argmax(deviations))
            steps.append(
                EsdStep(
                    iteration=i,
                    r_stat=float(deviations[j]),
                    critical=self.critical_value(n, i, alpha),
                    removed_id=int(remaining[j]),
                )
            )
            remaining = np.delete(remaining, j)

        n_outliers = 0
        for step in steps:
            if step.r_stat > step.critical:
                n_outliers = step.iteration
        return EsdResult(
            n_outliers=n_outliers,
            outlier_indices=[s.removed_id for s in steps[:n_outliers]],
            steps=steps,
        )

    def _screen_values(
        self, outcome: str, index: np.ndarray, values: np.ndarray, options: ScreeningOptions, pool: Optional[str]
    ) -> OutlierReport:
        if values.size < 4:
            return OutlierReport(outcome=outcome, flagged_count=0, alpha=options.alpha, pool=pool, note="fewer than 4 values, not screened")
        flagged = self.iqr_flag(values, options.k)
        if not flagged:
            return OutlierReport(outcome=outcome, flagged_count=0, alpha=options.alpha, pool=pool)
        max_outliers = min(len(flagged), values.size - 2)
        result = self.esd_test(values, max_outliers, options.alpha)
        confirmed = sorted(set(result.outlier_indices) & set(flagged))
        steps = [s.model_copy(update={"removed_id": int(index[s.removed_id])}) for s in result.steps]
        return OutlierReport(
            outcome=outcome,
            flagged_count=len(flagged),
            flagged_indices=[int(index[i]) for i in flagged],
            confirmed_indices=[int(index[i]) for i in confirmed],
            alpha=options.alpha,
            critical_values=[s.critical for s in steps],
            steps=steps,
            pool=pool,
        )

    def clean_outcome(
        self, panel: pd.DataFrame, outcome_name: str, options: ScreeningOptions = ScreeningOptions()
    ) -> Tuple[pd.DataFrame, List[OutlierReport]]:
        """Blank out confirmed outliers of one outcome.

        Observation ids are the frame's index labels. With per-period pools
        one report is returned per period.
        """
        if outcome_name not in panel.columns:
            raise InputError(f"outcome column {outcome_name!r} not present")
        out = panel.copy()
        column = pd.to_numeric(out[outcome_name], errors="coerce")
        present = column.notna()

        if options.pool == ScreeningPool.per_period:
            pools = [(f"period={p}", present & (out["period"] == p)) for p in sorted(out["period"].unique())]
        else:
            pools = [(None, present)]

        reports = []
        for label, selector in pools:
            sub = column.loc[selector]
            reports.append(self._screen_values(outcome_name, sub.index.to_numpy(), sub.to_numpy(dtype=float), options, label))

        confirmed = [i for report in reports for i in report.confirmed_indices]
        if confirmed:
            out.loc[confirmed, outcome_name] = np.nan
        logger.info(
            "screen %s: %d flagged, %d removed",
            outcome_name,
            sum(r.flagged_count for r in reports),
            len(confirmed),
        )
        return out, reports

    def screen_outcomes(
        self, outcomes: pd.DataFrame, options: ScreeningOptions = ScreeningOptions()
    ) -> Tuple[pd.DataFrame, List[OutlierReport]]:
        """Screen every outcome column, then z-score wealth.

        Outcomes are screened independently and in parallel; the removals are
        merged afterwards.
        """
        frame = outcomes.reset_index(drop=True)
        # A precomputed wealth_z column is screened in place of raw wealth
        has_raw = "wealth" in frame.columns and frame["wealth"].notna().any()
        wealth_column = "wealth" if has_raw else "wealth_z"
        columns = [c for c in ("log_urban", "log_crop", wealth_column) if c in frame.columns and frame[c].notna().any()]

        reports: List[OutlierReport] = []
        if options.enabled:
            results = parallel_map(lambda c: self.clean_outcome(frame, c, options), columns)
            for column, (cleaned, column_reports) in zip(columns, results):
                frame[column] = cleaned[column]
                reports.extend(column_reports)

        if wealth_column == "wealth":
            frame["wealth_z"] = raster_service.zscore(frame["wealth"].to_numpy(dtype=float))
        return frame, reports

    @staticmethod
    def report_frame(reports: Sequence[OutlierReport]) -> pd.DataFrame:
        rows = []
        for report in reports:
            confirmed = set(report.confirmed_indices)
            for step in report.steps:
                rows.append(
                    {
                        "outcome": report.outcome,
                        "pool": report.pool or "pooled",
                        "iteration": step.iteration,
                        "R_i": step.r_stat,
                        "lambda_i": step.critical,
                        "removed_id": step.removed_id,
                        "confirmed": int(step.removed_id in confirmed),
                    }
                )
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)


screening_service = ScreeningService()
