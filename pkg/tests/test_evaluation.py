"""Curve metrics, benchmark aggregation, and the alpha correlation analysis."""

import json

import numpy as np
import pytest

from trajgp.dataset import SubjectRecord, Visit
from trajgp.deep_kernel import PosteriorCurve
from trajgp.errors import BenchmarkError, GridCoverageError
from trajgp.evaluation import (
    AlphaRecord,
    alpha_correlation_analysis,
    evaluate_curve,
    run_benchmark,
    save_report,
    save_report_csv,
)


def subject_with(times, values):
    visits = tuple(Visit(t, v) for t, v in zip(times, values))
    return SubjectRecord("s", np.zeros(2), np.zeros(1), visits)


def record(t_obs, alpha, dev=1.0):
    return AlphaRecord("s", 2, alpha, 0.1, 1.0, 0.4, t_obs, dev, 0.0)


class TestEvaluateCurve:
    def test_perfect_prediction(self):
        curve = PosteriorCurve(np.array([12.0, 24.0]), np.array([1.0, 2.0]), np.array([0.04, 0.04]))
        m = evaluate_curve(curve, subject_with([12.0, 24.0], [1.0, 2.0]), t_obs=6.0)
        assert m.mae == 0.0 and m.coverage == 1.0

    def test_zero_variance_never_covers(self):
        curve = PosteriorCurve(np.array([12.0]), np.array([1.0]), np.array([0.0]))
        m = evaluate_curve(curve, subject_with([12.0], [1.1]), t_obs=0.0)
        assert m.coverage == 0.0

    def test_hand_case(self):
        curve = PosteriorCurve(
            np.array([6.0, 30.0]), np.array([1.1, 2.3]), np.array([0.01, 0.01])
        )
        heldout = subject_with([6.0, 30.0], [1.0, 2.0])
        m = evaluate_curve(curve, heldout, t_obs=0.0)
        assert m.mae == pytest.approx(0.2)
        assert m.coverage == pytest.approx(0.5)
        assert m.mean_interval_width == pytest.approx(0.4)
        assert m.ae_by_time == {6: pytest.approx(0.1), 30: pytest.approx(0.3)}

    def test_buckets_keyed_from_t_obs(self):
        curve = PosteriorCurve(np.array([20.0]), np.array([0.0]), np.array([1.0]))
        m = evaluate_curve(curve, subject_with([20.0], [0.5]), t_obs=18.0)
        assert list(m.ae_by_time) == [0]

    def test_missing_grid_time(self):
        curve = PosteriorCurve(np.array([0.0, 12.0]), np.zeros(2), np.zeros(2))
        with pytest.raises(GridCoverageError):
            evaluate_curve(curve, subject_with([13.0], [1.0]), t_obs=0.0)


class TestAlphaCorrelation:
    def test_constant_alpha_zero(self):
        records = [record(t, 0.5, dev=t) for t in np.linspace(0, 120, 40)]
        assert alpha_correlation_analysis(records) == 0.0

    def test_linear_alpha_minus_one(self):
        records = [record(t, 1.0 - t / 120.0, dev=t) for t in np.linspace(0, 120, 40)]
        assert alpha_correlation_analysis(records) == pytest.approx(-1.0)

    def test_too_few_records_skipped(self):
        records = [record(t, 0.5) for t in range(10)]
        assert alpha_correlation_analysis(records) is None


class TestRunBenchmark:
    def test_accounting_and_ranges(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        report = run_benchmark(small_pop, est, test, h=2)
        evaluated_visits = sum(
            s.n_visits - 2 for s in test.subjects if s.n_visits > 2
        )
        assert sum(info["n_heldout"] for info in report.per_subject.values()) == evaluated_visits
        assert 0.0 <= report.aggregate["mean_coverage"] <= 1.0
        assert report.aggregate["mean_interval_width"] >= 0.0
        assert report.aggregate["mae_ci95"] >= 0.0

    def test_point_estimate_independent_of_bootstrap_seed(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        a = run_benchmark(small_pop, est, test, h=3, bootstrap_seed=1)
        b = run_benchmark(small_pop, est, test, h=3, bootstrap_seed=2)
        assert a.aggregate["mean_mae"] == b.aggregate["mean_mae"]

    def test_h_sweep_alpha_by_h(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        report = run_benchmark(small_pop, est, test, h=[2, 3])
        assert set(report.alpha_by_h) == {2, 3}
        for mean, sd in report.alpha_by_h.values():
            assert 0.0 <= mean <= 1.0 and sd >= 0.0

    def test_leakage_rejected(self, small_pop, small_est, small_splits):
        est, _ = small_est
        train, _, _ = small_splits
        with pytest.raises(BenchmarkError, match="split leakage"):
            run_benchmark(small_pop, est, train, h=2)

    def test_history_too_long(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        with pytest.raises(BenchmarkError):
            run_benchmark(small_pop, est, test, h=99)

    def test_covariance_coverage_at_least_independent(self, small_pop, small_est, small_splits):
        # Wider intervals can only cover more, provided every rho >= 0.
        from dataclasses import replace

        est, _ = small_est
        _, _, test = small_splits
        pos = replace(est, error_correlation_by_h={k: abs(v) for k, v in est.error_correlation_by_h.items()})
        ind = run_benchmark(small_pop, pos, test, h=3, variance_mode="independent")
        cov = run_benchmark(small_pop, pos, test, h=3, variance_mode="covariance")
        assert cov.aggregate["mean_coverage"] >= ind.aggregate["mean_coverage"] - 1e-12

    def test_strata_cover_all_subjects(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        report = run_benchmark(small_pop, est, test, h=2)
        sex_groups = {k: v for k, v in report.strata.items() if k.startswith("sex=")}
        assert sum(v["n_subjects"] for v in sex_groups.values()) == len(report.per_subject)

    def test_workers_match_serial(self, small_pop, small_est, small_splits):
        est, _ = small_est
        _, _, test = small_splits
        a = run_benchmark(small_pop, est, test, h=3, workers=1)
        b = run_benchmark(small_pop, est, test, h=3, workers=2)
        assert a.aggregate == b.aggregate

    def test_outputs_well_formed(self, small_pop, small_est, small_splits, tmp_path):
        est, _ = small_est
        _, _, test = small_splits
        report = run_benchmark(small_pop, est, test, h=[2, 3])
        save_report(report, tmp_path / "report.json")
        save_report_csv(report, tmp_path / "report.csv")
        doc = json.loads((tmp_path / "report.json").read_text())
        assert set(doc["aggregate"]) == {"mean_mae", "mae_ci95", "mean_coverage", "mean_interval_width"}
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "subject_id,h,alpha,mae,coverage,width"
        assert len(lines) == len(report.records) + 1
