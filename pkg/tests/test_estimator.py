import math

import numpy as np
import pandas as pd
import pytest

from app.core.errors import InputError, NotEstimableError
from app.schemas.estimation import NEAR_FAR, Design, FESpec, InteractionMode
from app.schemas.stacking import Window
from app.services.clustering import cluster_vcov, twoway_vcov
from app.services.estimator_service import estimator_service, event_term
from app.services.fixed_effects import k_absorbed, within_transform
from app.services.synth_service import synth_service
from tests.conftest import random_fe_instance


def two_by_two(rng, n_treated=4, n_control=4):
    rows = []
    for i in range(n_treated + n_control):
        group = int(i < n_treated)
        for period in (1, 2):
            rows.append(
                {
                    "tile_id": f"t{i}",
                    "deposit_id": f"d{i}",
                    "country": "A",
                    "period": period,
                    "treat_group": group,
                    "post": int(period == 2),
                    "treat_post": group * int(period == 2),
                    "log_urban": rng.normal(0, 1) + 0.7 * group * (period == 2),
                    "near": 1,
                    "far": 0,
                }
            )
    return pd.DataFrame(rows)


def stacked_frame(rng, events=(("E1", 3), ("E2", 4)), n_periods=7):
    """Two overlapping events sharing control tiles c1 and c2"""
    members = {
        "E1": (["t1", "t2"], ["c1", "c2", "c3"]),
        "E2": (["t3", "t4"], ["c1", "c2"]),
    }
    deposit = {"t1": "d1", "t2": "d1", "t3": "d2", "t4": "d3", "c1": "d4", "c2": "d5", "c3": "d6"}
    rows = []
    for event_id, baseline in events:
        treated, control = members[event_id]
        for tile in treated + control:
            group = int(tile in treated)
            for period in range(1, n_periods + 1):
                rel = period - baseline
                rows.append(
                    {
                        "event_id": event_id,
                        "tile_id": tile,
                        "deposit_id": deposit[tile],
                        "country": "A",
                        "period": period,
                        "rel_time": rel,
                        "treat_group": group,
                        "treat_post": group * int(rel >= 1),
                        "log_urban": rng.normal(0, 0.2) + 0.5 * group * int(rel >= 1) + 0.1 * period,
                        "conflict_any": 0,
                    }
                )
    return pd.DataFrame(rows)


class TestWithinTransform:
    def test_single_dimension_exact(self, rng):
        codes = rng.integers(0, 7, 100)
        data = rng.normal(0, 1, (100, 2))
        out, sweeps = within_transform(data, [codes])
        assert sweeps == 1
        for g in range(7):
            assert np.allclose(out[codes == g].mean(axis=0), 0.0, atol=1e-12)

    def test_nested_dimensions(self, rng):
        inner = rng.integers(0, 12, 200)
        outer = inner // 4
        data = rng.normal(0, 1, 200)
        out, _ = within_transform(data, [outer, inner])
        single, _ = within_transform(data, [inner])
        assert np.allclose(out, single, atol=1e-10)

    def test_two_dimensions_orthogonal(self, rng):
        df = random_fe_instance(rng, 300, 10, 15)
        codes = [df["a"].to_numpy(), df["b"].to_numpy()]
        out, _ = within_transform(df["y"].to_numpy(), codes, tol=1e-13)
        for c in codes:
            means = pd.Series(out).groupby(c).mean()
            assert np.abs(means).max() < 1e-9

    def test_no_dimensions(self):
        with pytest.raises(InputError):
            within_transform(np.zeros(3), [])

    def test_matches_dummy_regression(self, rng):
        for _ in range(50):
            df = random_fe_instance(rng, 200, 8, 10)
            a, b = df["a"].to_numpy(), df["b"].to_numpy()
            xcols = ["x0", "x1", "x2"]
            demeaned, _ = within_transform(df[["y", *xcols]].to_numpy(), [a, b])
            fit = estimator_service.ols(demeaned[:, 1:], demeaned[:, 0])

            dummies = np.hstack(
                [
                    df[xcols].to_numpy(),
                    (a[:, None] == np.arange(a.max() + 1)).astype(float),
                    (b[:, None] == np.arange(1, b.max() + 1)).astype(float),
                ]
            )
            reference, *_ = np.linalg.lstsq(dummies, df["y"].to_numpy(), rcond=None)
            assert np.allclose(fit.beta, reference[:3], atol=1e-8)


class TestKAbsorbed:
    def test_single(self):
        assert k_absorbed([np.array([0, 1, 2, 2])]) == 3

    def test_connected(self):
        a = np.array([0, 0, 1, 1])
        b = np.array([0, 1, 0, 1])
        assert k_absorbed([a, b]) == 3

    def test_two_components(self):
        a = np.array([0, 0, 1, 1])
        b = np.array([0, 0, 1, 1])
        assert k_absorbed([a, b]) == 2


class TestOls:
    def test_exact_line(self):
        x = np.arange(1.0, 11.0)
        fit = estimator_service.ols(x, 2.0 * x)
        assert fit.beta[0] == pytest.approx(2.0)
        assert np.allclose(fit.residuals, 0.0)

    def test_duplicate_column_dropped(self, rng):
        x = rng.normal(0, 1, 50)
        z = rng.normal(0, 1, 50)
        X = np.column_stack([x, z, x])
        fit = estimator_service.ols(X, 3 * x - z)
        assert len(fit.kept) == 2
        assert len(fit.dropped) == 1
        assert fit.beta[fit.kept.index(1)] == pytest.approx(-1.0)

    def test_no_columns(self):
        with pytest.raises(NotEstimableError):
            estimator_service.ols(np.empty((5, 0)), np.zeros(5))

    def test_too_few_rows(self):
        with pytest.raises(NotEstimableError):
            estimator_service.ols(np.eye(2), np.ones(2))


class TestClusterVcov:
    def test_singleton_clusters_are_hc1(self, rng):
        X = rng.normal(0, 1, (40, 2))
        e = rng.normal(0, 1, 40)
        n, k = X.shape
        bread = np.linalg.inv(X.T @ X)
        hc1 = n / (n - k) * bread @ (X.T * e**2) @ X @ bread
        assert np.allclose(cluster_vcov(X, e, np.arange(n)), hc1, rtol=1e-10)

    def test_scale_of_residuals(self, rng):
        X = rng.normal(0, 1, (60, 2))
        e = rng.normal(0, 1, 60)
        ids = rng.integers(0, 8, 60)
        assert np.allclose(cluster_vcov(X, 10 * e, ids), 100 * cluster_vcov(X, e, ids), rtol=1e-10)

    def test_single_cluster(self, rng):
        with pytest.raises(NotEstimableError):
            cluster_vcov(rng.normal(0, 1, (10, 1)), rng.normal(0, 1, 10), np.zeros(10))


def brute_force_oneway(X, e, ids, k_abs=0):
    n, k = X.shape
    labels = sorted(set(ids))
    meat = np.zeros((k, k))
    for g in labels:
        rows = [i for i in range(n) if ids[i] == g]
        s = sum(X[i] * e[i] for i in rows)
        meat += np.outer(s, s)
    bread = np.linalg.inv(X.T @ X)
    G = len(labels)
    scale = G / (G - 1) * (n - 1) / (n - k - k_abs)
    return scale * bread @ meat @ bread


class TestTwowayVcov:
    def test_identical_dimensions(self, rng):
        X = rng.normal(0, 1, (50, 2))
        e = rng.normal(0, 1, 50)
        ids = rng.integers(0, 6, 50)
        assert np.allclose(twoway_vcov(X, e, ids, ids), cluster_vcov(X, e, ids))

    def test_nested_dimension(self, rng):
        X = rng.normal(0, 1, (50, 2))
        e = rng.normal(0, 1, 50)
        tiles = rng.integers(0, 20, 50)
        mines = tiles // 4
        assert np.allclose(twoway_vcov(X, e, mines, tiles), cluster_vcov(X, e, mines))

    def test_singleton_second_dimension(self, rng):
        X = rng.normal(0, 1, (30, 2))
        e = rng.normal(0, 1, 30)
        ids = rng.integers(0, 5, 30)
        assert np.allclose(twoway_vcov(X, e, ids, np.arange(30)), cluster_vcov(X, e, ids))

    def test_inclusion_exclusion(self, rng):
        for _ in range(20):
            X = rng.normal(0, 1, (60, 2))
            e = rng.normal(0, 1, 60)
            a = [int(v) for v in rng.integers(0, 5, 60)]
            b = [int(v) for v in rng.integers(0, 6, 60)]
            ab = [f"{i}-{j}" for i, j in zip(a, b)]
            expected = brute_force_oneway(X, e, a, 3) + brute_force_oneway(X, e, b, 3) - brute_force_oneway(X, e, ab, 3)
            got = twoway_vcov(X, e, a, b, k_absorbed=3, floor=False)
            assert np.allclose(got, expected, atol=1e-10)

    def test_floored_is_psd(self, rng):
        X = rng.normal(0, 1, (40, 3))
        e = rng.normal(0, 1, 40)
        v = twoway_vcov(X, e, rng.integers(0, 4, 40), rng.integers(0, 4, 40))
        assert np.linalg.eigvalsh(v).min() > -1e-12


class TestFit:
    def test_crossed_fixed_effects(self, rng):
        df = random_fe_instance(rng, 400, 10, 12)
        result = estimator_service.fit(df, "y", ["x0", "x1", "x2"], FESpec(dimensions=[("a",), ("b",)]), ["a"])
        reference = estimator_service.fit(
            df, "y", ["x0", "x1", "x2"], FESpec(dimensions=[("b",), ("a",)]), ["a"]
        )
        assert np.allclose(result.beta, reference.beta, atol=1e-6)
        assert result.n_clusters == {"a": 10}
        assert result.k_absorbed == 21

    def test_missing_column(self, rng):
        df = random_fe_instance(rng, 50, 3, 3)
        with pytest.raises(InputError):
            estimator_service.fit(df, "y", ["x9"], FESpec(dimensions=[("a",)]), ["a"])

    def test_absorbed_regressor_reported(self, rng):
        df = random_fe_instance(rng, 100, 5, 5)
        df["x_a"] = df["a"] * 2.0
        result = estimator_service.fit(df, "y", ["x0", "x_a"], FESpec(dimensions=[("a",), ("b",)]), ["a"])
        assert result.dropped_collinear == ["x_a"]
        assert math.isnan(result.coef("x_a"))


class TestDid:
    def test_two_by_two_equals_cell_means(self, rng):
        panel = two_by_two(rng)
        result = estimator_service.did(panel, Design.ordinary)
        assert result.coef("treat_post") == pytest.approx(synth_service.oracle_did(panel, "log_urban"), abs=1e-10)
        assert result.cluster_dims == ["deposit_id"]
        assert result.critical_value > 0

    def test_empty_interaction_is_not_estimable(self, rng):
        result = estimator_service.did(two_by_two(rng), Design.ordinary, NEAR_FAR)
        near, far = NEAR_FAR.term_names
        assert result.not_estimable == [far]
        assert math.isnan(result.coef(far))
        assert not math.isnan(result.coef(near))

    def test_outcome_shift_invariance(self, rng):
        data = stacked_frame(rng)
        base = estimator_service.did(data, Design.stacked)
        shifted = data.assign(log_urban=data["log_urban"] + 5.0)
        moved = estimator_service.did(shifted, Design.stacked)
        assert moved.coef("treat_post") == pytest.approx(base.coef("treat_post"), abs=1e-10)
        assert moved.stderr("treat_post") == pytest.approx(base.stderr("treat_post"), rel=1e-8)

    def test_event_labels_irrelevant(self, rng):
        data = stacked_frame(rng)
        base = estimator_service.did(data, Design.stacked)
        relabelled = data.assign(event_id=data["event_id"].map({"E1": "Z9", "E2": "A0"}))
        other = estimator_service.did(relabelled, Design.stacked)
        assert other.coef("treat_post") == pytest.approx(base.coef("treat_post"), abs=1e-10)

    def test_single_event_matches_ordinary(self, rng):
        data = stacked_frame(rng, events=(("E1", 3),))
        stacked = estimator_service.did(data, Design.stacked)
        ordinary = estimator_service.did(data, Design.ordinary)
        assert stacked.coef("treat_post") == pytest.approx(ordinary.coef("treat_post"), abs=1e-10)

    def test_effect_recovered_roughly(self, rng):
        result = estimator_service.did(stacked_frame(rng), Design.stacked)
        assert abs(result.coef("treat_post") - 0.5) < 0.3


class TestEventStudy:
    def test_reference_row_and_terms(self, rng):
        data = stacked_frame(rng)
        window = Window(t_neg=-2, t_pos=2)
        result = estimator_service.event_study(data, window, "log_urban")
        assert [r.rel_time for r in result.rows] == [-2, -1, 0, 1, 2]
        assert result.beta_at(0) == 0.0
        assert result.regression.terms == [event_term(t) for t in window.relative_times]
        frame = estimator_service.event_study_frame(result)
        assert list(frame.columns) == ["rel_time", "beta", "se", "ci_low", "ci_high"]

    def test_needs_post_period(self, rng):
        data = stacked_frame(rng)
        data = data.loc[data["rel_time"] <= 0]
        with pytest.raises(NotEstimableError):
            estimator_service.event_study(data, Window(t_neg=-2, t_pos=2), "log_urban")


class TestLpmConflict:
    def test_constant_outcome(self, rng):
        result = estimator_service.lpm_conflict(stacked_frame(rng))
        assert result.coef("treat_post") == 0.0
        assert result.baseline_mean == 0.0
        assert result.r2_within is None


class TestReporting:
    def test_percent_effect(self):
        assert estimator_service.percent_effect(0.59) == pytest.approx(0.8040, abs=1e-4)

    def test_ratio(self):
        assert estimator_service.ratio(1.0) == pytest.approx(2.718, abs=1e-3)

    def test_baseline_multiple(self):
        assert estimator_service.baseline_multiple(0.03, 0.01) == pytest.approx(3.0)
        assert estimator_service.baseline_multiple(0.03, None) is None

    def test_result_rows(self, rng):
        result = estimator_service.did(two_by_two(rng), Design.ordinary, InteractionMode.none)
        rows = estimator_service.result_rows("s", "log_urban", result)
        assert list(rows["term"]) == ["treat_post"]
        assert rows.loc[0, "clusters_mine"] == 8
        assert pd.isna(rows.loc[0, "clusters_tile"])
