import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from app.core.errors import InputError, NotEstimableError
from app.schemas.estimation import (
    ESTIMATE_COLUMNS,
    NEAR_FAR,
    ORDINARY_FE,
    STACKED_FE,
    ConflictSplit,
    Design,
    DEMOCRACY_AUTOCRACY,
    EventStudyResult,
    EventStudyRow,
    FESpec,
    HeterogeneitySpec,
    InteractionMode,
    Interactions,
    RegressionResult,
)
from app.schemas.geo import Band
from app.schemas.stacking import Window
from app.services.clustering import cluster_vcov, count_clusters, twoway_vcov
from app.services.fixed_effects import group_codes, k_absorbed, within_transform
from app.services.student_t import t_quantile

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-10
CONFIDENCE = 0.95
MINE_CLUSTER = "deposit_id"
TILE_CLUSTER = "tile_id"


@dataclass
class OlsFit:
    beta: np.ndarray
    residuals: np.ndarray
    kept: List[int]
    dropped: List[int] = field(default_factory=list)


def event_term(t: int) -> str:
    return f"D[{t}]"


class EstimatorService:
    """Fixed-effects least squares and the regression designs built on it"""

    @staticmethod
    def ols(X: np.ndarray, y: np.ndarray, tol: float = PIVOT_TOL) -> OlsFit:
        """Least squares through a column-pivoted QR; collinear columns are dropped"""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] == 0:
            raise NotEstimableError("no regressors to estimate")
        q, r, piv = linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag.size == 0 or diag[0] == 0.0:
            raise NotEstimableError("all regressors are zero")
        rank = int(np.sum(diag > tol * diag[0]))
        if X.shape[0] <= rank:
            raise NotEstimableError(f"need more observations than regressors (n={X.shape[0]}, rank={rank})")
        coef = linalg.solve_triangular(r[:rank, :rank], q[:, :rank].T @ y)
        order = np.argsort(piv[:rank])
        kept = [int(i) for i in piv[:rank][order]]
        beta = coef[order]
        residuals = y - X[:, kept] @ beta
        return OlsFit(beta=beta, residuals=residuals, kept=kept, dropped=sorted(int(i) for i in piv[rank:]))

    def fit(
        self,
        data: pd.DataFrame,
        outcome: str,
        regressors: Sequence[str],
        fe: FESpec,
        clusters: Sequence[str],
        not_estimable: Sequence[str] = (),
        baseline_mean: Optional[float] = None,
    ) -> RegressionResult:
        """Absorb fe, solve by QR and attach one- or two-way clustered inference.

        Regressors listed in not_estimable are reported with missing values
        and left out of the regression.
        """
        regressors = list(regressors)
        missing = [c for c in [outcome, *regressors, *clusters] if c not in data.columns]
        if missing:
            raise InputError(f"estimation data lacks column(s): {', '.join(missing)}")
        active = [r for r in regressors if r not in set(not_estimable)]
        if not active:
            raise NotEstimableError("no estimable regressors")

        frame = data.loc[data[outcome].notna() & data[active].notna().all(axis=1)]
        if len(frame) == 0:
            raise NotEstimableError(f"no observations with {outcome} available")
        codes = group_codes(frame, fe)
        raw = frame[[outcome, *active]].to_numpy(dtype=float)
        demeaned, iterations = within_transform(raw, codes)
        y, X = demeaned[:, 0], demeaned[:, 1:]

        # A regressor absorbed entirely by the fixed effects has no variation left
        fit = self.ols(X, y)
        dropped = [active[i] for i in fit.dropped]
        if dropped:
            logger.info("dropped collinear regressor(s): %s", ", ".join(dropped))
        X_kept = X[:, fit.kept]
        n_obs = X.shape[0]
        k_abs = k_absorbed(codes)

        cluster_counts = {c: count_clusters(frame[c].to_numpy()) for c in clusters}
        if len(clusters) == 1:
            vcov = cluster_vcov(X_kept, fit.residuals, frame[clusters[0]].to_numpy(), k_abs)
        elif len(clusters) == 2:
            vcov = twoway_vcov(
                X_kept, fit.residuals, frame[clusters[0]].to_numpy(), frame[clusters[1]].to_numpy(), k_abs
            )
        else:
            raise InputError("one or two clustering dimensions are supported")
        df = min(cluster_counts.values()) - 1
        critical = t_quantile(0.5 + CONFIDENCE / 2.0, df)

        ssr = float(fit.residuals @ fit.residuals)
        tss_within = float(y @ y)
        y_raw = raw[:, 0]
        tss = float(((y_raw - y_raw.mean()) ** 2).sum())
        n_params = len(fit.kept) + k_abs
        r2_within = 1.0 - ssr / tss_within if tss_within > 0 else None
        r2 = 1.0 - ssr / tss if tss > 0 else None
        r2_adj = 1.0 - (1.0 - r2) * (n_obs - 1) / (n_obs - n_params) if r2 is not None and n_obs > n_params else None

        index = {active[i]: pos for pos, i in enumerate(fit.kept)}
        k = len(regressors)
        beta = [math.nan] * k
        se = [math.nan] * k
        full_vcov = [[math.nan] * k for _ in range(k)]
        for a, name_a in enumerate(regressors):
            if name_a not in index:
                continue
            beta[a] = float(fit.beta[index[name_a]])
            se[a] = float(math.sqrt(max(vcov[index[name_a], index[name_a]], 0.0)))
            for b, name_b in enumerate(regressors):
                if name_b in index:
                    full_vcov[a][b] = float(vcov[index[name_a], index[name_b]])
        ci_low = [b - critical * s for b, s in zip(beta, se)]
        ci_high = [b + critical * s for b, s in zip(beta, se)]

        return RegressionResult(
            terms=regressors,
            beta=beta,
            se=se,
            vcov=full_vcov,
            ci_low=ci_low,
            ci_high=ci_high,
            critical_value=critical,
            df_resid=n_obs - n_params,
            cluster_dims=list(clusters),
            n_clusters=cluster_counts,
            n_obs=n_obs,
            k_absorbed=k_abs,
            r2_within=r2_within,
            r2_adjusted=r2_adj,
            dropped_collinear=dropped,
            not_estimable=list(not_estimable),
            fe_labels=fe.labels,
            baseline_mean=baseline_mean,
            iterations=iterations,
        )

    # Designs

    @staticmethod
    def restrict_band(data: pd.DataFrame, band: Optional[Band]) -> pd.DataFrame:
        if band is None:
            return data
        return data.loc[data["band"] == Band(band).value]

    def event_study(
        self,
        stacked: pd.DataFrame,
        window: Window,
        outcome: str,
        band: Optional[Band] = None,
    ) -> EventStudyResult:
        """Relative-period effects with t = 0 as the omitted baseline"""
        data = self.restrict_band(stacked, band)
        data = data.loc[data[outcome].notna() & data["rel_time"].between(window.t_neg, window.t_pos)].copy()
        treated = data["treat_group"] == 1
        if not (treated & (data["rel_time"] < 0)).any() or not (treated & (data["rel_time"] >= 1)).any():
            raise NotEstimableError("event study needs treated observations before and after treatment")

        terms = []
        empty = []
        for t in window.relative_times:
            name = event_term(t)
            data[name] = ((data["rel_time"] == t) & treated).astype(float)
            terms.append(name)
            if data[name].sum() == 0:
                empty.append(name)
        result = self.fit(data, outcome, terms, STACKED_FE, [MINE_CLUSTER, TILE_CLUSTER], not_estimable=empty)

        rows = [EventStudyRow(rel_time=0, beta=0.0, se=0.0, ci_low=0.0, ci_high=0.0)]
        for t in window.relative_times:
            i = result.index(event_term(t))
            rows.append(
                EventStudyRow(rel_time=t, beta=result.beta[i], se=result.se[i], ci_low=result.ci_low[i], ci_high=result.ci_high[i])
            )
        rows.sort(key=lambda r: r.rel_time)
        return EventStudyResult(rows=rows, regression=result)

    @staticmethod
    def interaction_terms(data: pd.DataFrame, interactions: Interactions) -> Tuple[pd.DataFrame, List[str], List[str]]:
        """Add treat_post interaction columns; returns the frame, term names and empty terms"""
        if interactions == InteractionMode.none:
            return data, ["treat_post"], []
        spec = NEAR_FAR if interactions == InteractionMode.near_far else interactions
        if not isinstance(spec, HeterogeneitySpec):
            raise InputError(f"unsupported interactions {interactions!r}")
        out = data.copy()
        names = spec.term_names
        empty = []
        if spec.include_main:
            if out["treat_post"].sum() == 0:
                empty.append("treat_post")
        for term, name in zip(spec.terms, names[1:] if spec.include_main else names):
            missing = [c for c in term if c not in out.columns]
            if missing:
                raise InputError(f"category column(s) {', '.join(missing)} not in data")
            product = out["treat_post"].astype(float)
            for column in term:
                product = product * out[column].astype(float)
            out[name] = product
            if out[name].fillna(0).sum() == 0:
                empty.append(name)
        if empty:
            logger.warning("interaction term(s) without treated observations: %s", ", ".join(empty))
        return out, names, empty

    def did(
        self,
        dataset: pd.DataFrame,
        design: Design,
        interactions: Interactions = InteractionMode.none,
        outcome: str = "log_urban",
        band: Optional[Band] = None,
    ) -> RegressionResult:
        """Difference-in-differences on the post-treatment indicator.

        Ordinary designs absorb country x period and tile effects and cluster
        by mine; stacked designs absorb event x period and event x tile and
        cluster by mine and tile.
        """
        data = self.restrict_band(dataset, band)
        data, terms, empty = self.interaction_terms(data, interactions)
        if design == Design.ordinary:
            fe, clusters = ORDINARY_FE, [MINE_CLUSTER]
        else:
            fe, clusters = STACKED_FE, [MINE_CLUSTER, TILE_CLUSTER]
        return self.fit(data, outcome, terms, fe, clusters, not_estimable=empty)

    def lpm_conflict(
        self,
        stacked: pd.DataFrame,
        split: ConflictSplit = ConflictSplit.pooled,
        band: Optional[Band] = None,
        design: Design = Design.stacked,
    ) -> RegressionResult:
        """Linear probability model for any conflict in a tile-period"""
        data = self.restrict_band(stacked, band)
        data = data.loc[(data["period"] >= 2) & data["conflict_any"].notna()]
        pre_treated = data.loc[(data["treat_group"] == 1) & (data["treat_post"] == 0), "conflict_any"]
        baseline = float(pre_treated.mean()) if len(pre_treated) else None
        interactions = InteractionMode.none if split == ConflictSplit.pooled else DEMOCRACY_AUTOCRACY
        result = self.did(data, design, interactions, "conflict_any")
        return result.model_copy(update={"baseline_mean": baseline})

    # Reporting

    @staticmethod
    def percent_effect(beta: float) -> float:
        """Proportional change implied by a log-point coefficient"""
        return math.exp(beta) - 1.0

    @staticmethod
    def ratio(beta: float) -> float:
        return math.exp(beta)

    @staticmethod
    def baseline_multiple(effect: float, baseline: Optional[float]) -> Optional[float]:
        if not baseline:
            return None
        return effect / baseline

    @staticmethod
    def result_rows(spec: str, outcome: str, result: RegressionResult) -> pd.DataFrame:
        rows = []
        for i, term in enumerate(result.terms):
            rows.append(
                {
                    "spec": spec,
                    "outcome": outcome,
                    "term": term,
                    "beta": result.beta[i],
                    "se": result.se[i],
                    "ci_low": result.ci_low[i],
                    "ci_high": result.ci_high[i],
                    "n": result.n_obs,
                    "clusters_mine": result.n_clusters.get(MINE_CLUSTER),
                    "clusters_tile": result.n_clusters.get(TILE_CLUSTER),
                    "r2_adj": result.r2_adjusted,
                    "fe": "; ".join(result.fe_labels),
                    "baseline_mean": result.baseline_mean,
                }
            )
        return pd.DataFrame(rows, columns=ESTIMATE_COLUMNS)

    @staticmethod
    def event_study_frame(result: EventStudyResult) -> pd.DataFrame:
        return pd.DataFrame(
            [r.model_dump() for r in result.rows], columns=["rel_time", "beta", "se", "ci_low", "ci_high"]
        )


estimator_service = EstimatorService()
