"""Oracle shrinkage, posterior combination, and the alpha pipeline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajgp.dataset import Cohort, SynthConfig, generate_synthetic_cohort
from trajgp.errors import BenchmarkError, FormatError, ParameterError, ParseError, ShapeError
from trajgp.shrinkage import (
    AlphaTrainingRow,
    ShrinkageFeatures,
    build_alpha_dataset,
    combine_posterior,
    estimate_error_correlation,
    gbt_fit,
    gbt_predict,
    load_estimator,
    oracle_alpha,
    personalize,
    personalize_full,
    save_alpha_dataset_csv,
    save_estimator,
    trajectory_grid,
    _pearson,
)
from trajgp.numerics import make_rng


def objective(alpha, truth, yp, ys):
    blend = alpha * yp + (1 - alpha) * ys
    return float(np.sum((truth - blend) ** 2))


class TestOracleAlpha:
    def test_population_exact(self):
        truth = np.array([1.0, 2.0, 3.0])
        ys = truth + np.array([0.5, -0.2, 0.1])
        assert oracle_alpha(truth, truth, ys) == 1.0

    def test_subject_exact(self):
        truth = np.array([1.0, 2.0, 3.0])
        yp = truth + 1.0
        assert oracle_alpha(truth, yp, truth) == 0.0

    def test_even_blend(self):
        yp = np.array([2.0, 0.0, 1.0])
        ys = np.array([0.0, 2.0, 3.0])
        truth = 0.5 * yp + 0.5 * ys
        assert oracle_alpha(truth, yp, ys) == pytest.approx(0.5, abs=1e-12)

    def test_identical_predictors_convention(self):
        y = np.array([1.0, 2.0])
        assert oracle_alpha(y + 9.0, y, y) == 1.0

    def test_matches_grid_search(self):
        # Oracle: brute-force argmin over a fine alpha grid.
        rng = make_rng(55)
        grid = np.linspace(0.0, 1.0, 10001)
        for _ in range(100):
            truth = rng.normal(size=6)
            yp = rng.normal(size=6)
            ys = rng.normal(size=6)
            closed = oracle_alpha(truth, yp, ys)
            costs = [objective(a, truth, yp, ys) for a in grid]
            best = grid[int(np.argmin(costs))]
            assert abs(closed - best) <= 1e-3
            assert objective(closed, truth, yp, ys) <= min(costs) + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8),
           st.lists(st.floats(-5, 5), min_size=2, max_size=8),
           st.lists(st.floats(-5, 5), min_size=2, max_size=8))
    def test_convexity_exactness(self, truth, yp, ys):
        n = min(len(truth), len(yp), len(ys))
        truth, yp, ys = np.array(truth[:n]), np.array(yp[:n]), np.array(ys[:n])
        closed = oracle_alpha(truth, yp, ys)
        coarse = np.linspace(0.0, 1.0, 1001)
        j_closed = objective(closed, truth, yp, ys)
        assert all(j_closed <= objective(a, truth, yp, ys) + 1e-9 for a in coarse)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            oracle_alpha(np.ones(3), np.ones(2), np.ones(3))


class TestCombinePosterior:
    def test_alpha_one_returns_population(self):
        yp, vp = np.array([1.0, 2.0]), np.array([0.3, 0.4])
        ys, vs = np.array([9.0, 9.0]), np.array([9.0, 9.0])
        yc, vc = combine_posterior(yp, vp, ys, vs, 1.0)
        assert np.array_equal(yc, yp) and np.array_equal(vc, vp)

    def test_even_independent(self):
        yc, vc = combine_posterior(np.array([1.0]), np.array([1.0]),
                                   np.array([3.0]), np.array([1.0]), 0.5)
        assert yc[0] == pytest.approx(2.0)
        assert vc[0] == pytest.approx(0.5)

    def test_even_with_correlation(self):
        _, vc = combine_posterior(np.array([0.0]), np.array([1.0]),
                                  np.array([0.0]), np.array([1.0]), 0.5, rho=0.4)
        assert vc[0] == pytest.approx(0.7)

    def test_rho_out_of_range(self):
        with pytest.raises(ParameterError):
            combine_posterior(np.ones(1), np.ones(1), np.ones(1), np.ones(1), 0.5, rho=1.5)

    def test_alpha_out_of_range(self):
        with pytest.raises(ParameterError):
            combine_posterior(np.ones(1), np.ones(1), np.ones(1), np.ones(1), 1.2)

    def test_mean_between_components(self):
        rng = make_rng(66)
        for _ in range(200):
            yp, ys = rng.normal(size=4), rng.normal(size=4)
            alpha = float(rng.random())
            yc, _ = combine_posterior(yp, np.ones(4), ys, np.ones(4), alpha)
            assert np.all(yc <= np.maximum(yp, ys) + 1e-12)
            assert np.all(yc >= np.minimum(yp, ys) - 1e-12)

    def test_independent_below_covariance_for_positive_rho(self):
        rng = make_rng(67)
        for _ in range(10000):
            vp, vs = rng.uniform(0.01, 2.0, size=2)
            alpha = float(rng.uniform(0.01, 0.99))
            rho = float(rng.uniform(0.0, 1.0))
            _, ind = combine_posterior(np.zeros(1), np.array([vp]), np.zeros(1), np.array([vs]), alpha)
            _, cov = combine_posterior(np.zeros(1), np.array([vp]), np.zeros(1), np.array([vs]), alpha, rho=rho)
            assert ind[0] <= cov[0] + 1e-15
            if rho > 0:
                assert ind[0] < cov[0] + 1e-15


class TestAlphaDataset:
    def test_row_count_single_subject(self, small_pop):
        from dataclasses import replace

        cohort = generate_synthetic_cohort(
            SynthConfig(n_subjects=3, feature_dim=small_pop.feature_dim,
                        visits_per_subject=(5, 5), seed=83)
        )
        lone = replace(cohort.subjects[0], subject_id="fresh")
        one = Cohort((lone,), cohort.feature_dim, cohort.covariate_dim)
        rows = build_alpha_dataset(small_pop, one, h_range=range(2, 5))
        assert len(rows) == 3
        assert [r.h for r in rows] == [2, 3, 4]

    def test_alphas_clamped(self, small_est):
        _, rows = small_est
        assert all(0.0 <= r.oracle_alpha <= 1.0 for r in rows)

    def test_leakage_rejected(self, small_pop, small_splits):
        train, _, _ = small_splits
        with pytest.raises(BenchmarkError, match="split leakage"):
            build_alpha_dataset(small_pop, train)

    def test_csv_dump_schema(self, small_est, tmp_path):
        _, rows = small_est
        path = tmp_path / "alpha.csv"
        save_alpha_dataset_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "subject_id,h,mean_yp,mean_ys,mean_vp,mean_vs,t_obs,alpha"
        assert len(lines) == len(rows) + 1

    def test_workers_match_serial(self, small_pop, small_splits):
        _, val, _ = small_splits
        two = Cohort(val.subjects[:3], val.feature_dim, val.covariate_dim)
        serial = build_alpha_dataset(small_pop, two, workers=1)
        parallel = build_alpha_dataset(small_pop, two, workers=2)
        assert [(r.subject_id, r.h, r.oracle_alpha) for r in serial] == [
            (r.subject_id, r.h, r.oracle_alpha) for r in parallel
        ]


class TestErrorCorrelation:
    def test_identical_errors_give_one(self):
        e = np.array([0.5, -0.2, 0.9, 0.1])
        assert _pearson(e, e) == pytest.approx(1.0)

    def test_zero_variance_convention(self):
        assert _pearson(np.ones(5), np.arange(5.0)) == 0.0

    def test_pipeline_range(self, small_pop, small_splits):
        _, val, _ = small_splits
        corr = estimate_error_correlation(small_pop, val)
        assert corr, "expected at least one history length with >= 10 points"
        for h, rho in corr.items():
            assert -1.0 <= rho <= 1.0 and np.isfinite(rho)


class TestGbt:
    def make_rows(self, x, y):
        return [
            AlphaTrainingRow(
                ShrinkageFeatures(float(a), float(b), float(abs(c)), float(abs(d)), float(abs(t))),
                float(np.clip(alpha, 0, 1)), f"s{i}", 2,
            )
            for i, ((a, b, c, d, t), alpha) in enumerate(zip(x, y))
        ]

    def test_constant_targets(self):
        rng = make_rng(91)
        rows = self.make_rows(rng.normal(size=(30, 5)), np.full(30, 0.7))
        est = gbt_fit(rows)
        for r in rows[:5]:
            assert gbt_predict(est, r.features) == pytest.approx(0.7, abs=1e-12)

    def test_step_function_learnable(self):
        rng = make_rng(92)
        x = rng.normal(size=(500, 5))
        x[:, 4] = rng.uniform(0.0, 48.0, size=500)
        y = np.where(x[:, 4] < 12.0, 0.9, 0.2)
        est = gbt_fit(self.make_rows(x, y))
        x_test = rng.normal(size=(200, 5))
        x_test[:, 4] = rng.uniform(0.0, 48.0, size=200)
        y_test = np.where(x_test[:, 4] < 12.0, 0.9, 0.2)
        rows_test = self.make_rows(x_test, y_test)
        preds = np.array([gbt_predict(est, r.features) for r in rows_test])
        assert float(np.mean((preds - y_test) ** 2)) < 0.01

    def test_monotone_trend_in_t_obs(self):
        rng = make_rng(93)
        x = rng.normal(size=(400, 5))
        x[:, 4] = rng.uniform(0.0, 48.0, size=400)
        y = np.clip(1.0 - x[:, 4] / 48.0 + rng.normal(0, 0.05, size=400), 0, 1)
        est = gbt_fit(self.make_rows(x, y))

        def mean_pred(t_obs):
            vals = []
            for row in x[:100]:
                f = ShrinkageFeatures(row[0], row[1], abs(row[2]), abs(row[3]), t_obs)
                vals.append(gbt_predict(est, f))
            return np.mean(vals)

        assert mean_pred(36.0) < mean_pred(6.0)

    def test_training_mse_non_increasing(self, small_est):
        est, _ = small_est
        mse = est.model.train_mse
        assert all(b <= a + 1e-12 for a, b in zip(mse, mse[1:]))

    def test_permutation_invariance(self):
        rng = make_rng(94)
        x = rng.normal(size=(120, 5))
        y = np.clip(0.5 + 0.3 * np.tanh(x[:, 0]) - 0.2 * np.tanh(x[:, 4]), 0, 1)
        rows = self.make_rows(x, y)
        est_a = gbt_fit(rows)
        perm = rng.permutation(len(rows))
        est_b = gbt_fit([rows[i] for i in perm])
        probes = self.make_rows(rng.normal(size=(50, 5)), np.zeros(50))
        for r in probes:
            assert abs(gbt_predict(est_a, r.features) - gbt_predict(est_b, r.features)) < 1e-9

    def test_degenerate_identical_rows(self, caplog):
        rows = self.make_rows(np.zeros((20, 5)), np.linspace(0, 1, 20))
        est = gbt_fit(rows)
        assert est.model.trees == []
        assert gbt_predict(est, rows[0].features) == pytest.approx(0.5, abs=1e-9)

    def test_too_few_rows(self):
        rows = self.make_rows(np.zeros((4, 5)), np.zeros(4))
        with pytest.raises(ParameterError):
            gbt_fit(rows)

    def test_predictions_clamped(self):
        rng = make_rng(95)
        rows = self.make_rows(rng.normal(size=(40, 5)), np.ones(40))
        est = gbt_fit(rows)
        for r in rows[:10]:
            assert 0.0 <= gbt_predict(est, r.features) <= 1.0

    def test_tobs_importance_positive_on_history_dataset(self, small_est):
        est, rows = small_est
        alphas_by_h = {}
        for r in rows:
            alphas_by_h.setdefault(r.h, []).append(r.oracle_alpha)
        means = [np.mean(v) for _, v in sorted(alphas_by_h.items())]
        assert means[0] != means[-1]  # oracle alpha varies with history here
        assert est.feature_importance["t_obs"] > 0.0


class TestPersonalize:
    def test_single_visit_falls_back_to_population(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        from trajgp.dataset import truncate_history
        from trajgp.population import predict_population

        subject = test.subjects[0]
        observed, _ = truncate_history(subject, 1)
        grid = trajectory_grid(subject.times[-1], subject.times, 6.0)
        curve, alpha = personalize(small_pop, est, observed, grid)
        assert alpha == 1.0
        pop_curve = predict_population(small_pop, observed, grid)
        assert np.array_equal(curve.mean, pop_curve.mean)
        assert np.array_equal(curve.variance, pop_curve.variance)

    def test_alpha_in_unit_interval(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        from trajgp.dataset import truncate_history

        for subject in test.subjects[:5]:
            for h in range(2, subject.n_visits):
                observed, _ = truncate_history(subject, h)
                grid = trajectory_grid(subject.times[-1], subject.times, 6.0)
                _, alpha = personalize(small_pop, est, observed, grid)
                assert 0.0 <= alpha <= 1.0

    def test_constant_policy(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        from trajgp.dataset import truncate_history

        subject = next(s for s in test.subjects if s.n_visits >= 4)
        observed, _ = truncate_history(subject, 3)
        grid = trajectory_grid(subject.times[-1], subject.times, 6.0)
        res = personalize_full(small_pop, est, observed, grid, alpha_policy=0.25)
        assert res.alpha == 0.25
        blend = 0.25 * res.population_curve.mean + 0.75 * res.subject_curve.mean
        np.testing.assert_allclose(res.curve.mean, blend, rtol=1e-12)

    def test_deterministic_policy_bounds(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        from trajgp.dataset import truncate_history

        subject = next(s for s in test.subjects if s.n_visits >= 5)
        observed, _ = truncate_history(subject, 4)
        grid = trajectory_grid(subject.times[-1], subject.times, 6.0)
        res = personalize_full(small_pop, est, observed, grid, alpha_policy="deterministic")
        assert 0.0 <= res.alpha <= 1.0

    def test_covariance_mode_uses_nearest_rho(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        from trajgp.dataset import truncate_history

        subject = next(s for s in test.subjects if s.n_visits >= 4)
        observed, _ = truncate_history(subject, 3)
        grid = trajectory_grid(subject.times[-1], subject.times, 6.0)
        res_ind = personalize_full(small_pop, est, observed, grid, "independent")
        res_cov = personalize_full(small_pop, est, observed, grid, "covariance")
        rho_keys = sorted(est.error_correlation_by_h, key=lambda k: (abs(k - 3), k))
        rho = est.error_correlation_by_h[rho_keys[0]]
        a = res_cov.alpha
        expected = res_ind.curve.variance + 2 * a * (1 - a) * rho * np.sqrt(
            res_ind.population_curve.variance * res_ind.subject_curve.variance
        )
        np.testing.assert_allclose(res_cov.curve.variance, np.maximum(expected, 0.0), rtol=1e-10)


class TestEstimatorSerialization:
    def test_round_trip(self, small_est, tmp_path):
        est, _ = small_est
        path = tmp_path / "est.json"
        save_estimator(est, path)
        loaded = load_estimator(path)
        rng = make_rng(44)
        for _ in range(20):
            f = ShrinkageFeatures(*np.abs(rng.normal(size=5)))
            assert gbt_predict(loaded, f) == gbt_predict(est, f)
        assert loaded.error_correlation_by_h == est.error_correlation_by_h
        assert loaded.feature_importance == est.feature_importance

    def test_corrupt_payload(self, small_est, tmp_path):
        est, _ = small_est
        path = tmp_path / "est.json"
        save_estimator(est, path)
        path.write_text(path.read_text()[:150], encoding="utf-8")
        with pytest.raises(ParseError):
            load_estimator(path)

    def test_version_mismatch(self, small_est, tmp_path):
        import json

        est, _ = small_est
        path = tmp_path / "est.json"
        save_estimator(est, path)
        doc = json.loads(path.read_text())
        doc["version"] = 999
        path.write_text(json.dumps(doc), encoding="utf-8")
        with pytest.raises(FormatError):
            load_estimator(path)
