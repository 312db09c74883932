"""Cohort model, CSV round trips, splitting, and the synthetic generator."""

import numpy as np
import pytest

from trajgp.dataset import (
    Cohort,
    ProgressionLabel,
    SubjectRecord,
    SynthConfig,
    Visit,
    cohort_to_bytes,
    generate_synthetic_cohort,
    load_cohort_csv,
    sample_trajectory_params,
    save_cohort_csv,
    split_cohort,
    truncate_history,
)
from trajgp.errors import (
    DuplicateVisitError,
    EmptyCohortError,
    HistoryError,
    ParseError,
    SchemaError,
    SplitError,
)
from trajgp.numerics import make_rng

HEADER = "subject_id,time_months,y," + ",".join(f"x_{i}" for i in range(2)) + ",c_0,label"


def write_cohort(tmp_path, rows, header=HEADER):
    path = tmp_path / "cohort.csv"
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


class TestLoadCsv:
    def test_minimal_two_rows(self, tmp_path):
        path = write_cohort(tmp_path, ["a,0,1.5,0.1,0.2,1,stable", "a,12,1.4,0.1,0.2,1,stable"])
        cohort = load_cohort_csv(path)
        assert len(cohort) == 1
        assert cohort.subjects[0].n_visits == 2
        assert cohort.feature_dim == 2 and cohort.covariate_dim == 1

    def test_rebasing(self, tmp_path):
        path = write_cohort(tmp_path, ["a,6,1.5,0,0,0,slow", "a,18,1.4,0,0,0,slow"])
        cohort = load_cohort_csv(path)
        assert [v.time_months for v in cohort.subjects[0].visits] == [0.0, 12.0]

    def test_missing_column_named(self, tmp_path):
        path = write_cohort(tmp_path, ["a,0,0.1,0.2,1,stable"],
                            header="subject_id,time_months,x_0,x_1,c_0,label")
        with pytest.raises(SchemaError, match="y"):
            load_cohort_csv(path)

    def test_nonfinite_reports_row(self, tmp_path):
        path = write_cohort(tmp_path, ["a,0,1.5,0,0,0,fast", "a,12,nan,0,0,0,fast"])
        with pytest.raises(ParseError, match="row 3"):
            load_cohort_csv(path)

    def test_duplicate_visit(self, tmp_path):
        path = write_cohort(tmp_path, ["a,0,1.5,0,0,0,fast", "a,0,1.4,0,0,0,fast"])
        with pytest.raises(DuplicateVisitError):
            load_cohort_csv(path)

    def test_inconsistent_features(self, tmp_path):
        path = write_cohort(tmp_path, ["a,0,1.5,0,0,0,fast", "a,12,1.4,9,0,0,fast"])
        with pytest.raises(SchemaError, match="different features"):
            load_cohort_csv(path)

    def test_unknown_label(self, tmp_path):
        path = write_cohort(tmp_path, ["a,0,1.5,0,0,0,worse"])
        with pytest.raises(ParseError, match="label"):
            load_cohort_csv(path)

    def test_round_trip_bytes(self, tmp_path):
        cohort = generate_synthetic_cohort(SynthConfig(n_subjects=8, seed=4))
        f1 = tmp_path / "one.csv"
        f2 = tmp_path / "two.csv"
        save_cohort_csv(cohort, f1)
        save_cohort_csv(load_cohort_csv(f1), f2)
        assert f1.read_bytes() == f2.read_bytes()


class TestGenerator:
    def test_deterministic_bytes(self):
        config = SynthConfig(n_subjects=12, seed=99)
        assert cohort_to_bytes(generate_synthetic_cohort(config)) == cohort_to_bytes(
            generate_synthetic_cohort(config)
        )

    def test_stable_class_flat(self):
        # Pinned seed: a flat template leaves only measurement noise.
        config = SynthConfig(n_subjects=5, class_mix=(1.0, 0.0, 0.0), noise_sd=1e-4, seed=5)
        for s in generate_synthetic_cohort(config).subjects:
            assert s.progression_label is ProgressionLabel.STABLE
            assert s.values.max() - s.values.min() <= 3 * config.noise_sd

    def test_class_counts_binomial(self):
        # Oracle: count the labels, compare to 3 binomial standard deviations.
        config = SynthConfig(n_subjects=1000, seed=17)
        cohort = generate_synthetic_cohort(config)
        counts = {label: 0 for label in ProgressionLabel}
        for s in cohort.subjects:
            counts[s.progression_label] += 1
        for p, label in zip(config.class_mix,
                            (ProgressionLabel.STABLE, ProgressionLabel.SLOW, ProgressionLabel.FAST)):
            sd = np.sqrt(1000 * p * (1 - p))
            assert abs(counts[label] - 1000 * p) <= 3 * sd

    def test_fast_template_drops(self):
        # Every fast-progressor template loses at least 0.8 by month 120.
        rng = make_rng(31)
        for _ in range(500):
            params = sample_trajectory_params(rng, ProgressionLabel.FAST)
            assert params.value(0.0) - params.value(120.0) >= 0.8

    def test_zero_subjects_rejected(self):
        with pytest.raises(EmptyCohortError):
            generate_synthetic_cohort(SynthConfig(n_subjects=0))

    def test_bad_mix_rejected(self):
        with pytest.raises(ParseError):
            SynthConfig(n_subjects=5, class_mix=(0.5, 0.5, 0.5))


class TestSplit:
    def test_sizes_rounding(self, ):
        cohort = generate_synthetic_cohort(SynthConfig(n_subjects=10, seed=1))
        train, val, test = split_cohort(cohort, (0.8, 0.1, 0.1), seed=0)
        assert (len(train), len(val), len(test)) == (8, 1, 1)

    def test_partition_property(self):
        cohort = generate_synthetic_cohort(SynthConfig(n_subjects=17, seed=2))
        all_ids = set(cohort.subject_ids())
        for seed in range(100):
            parts = split_cohort(cohort, (0.5, 0.25, 0.25), seed=seed)
            ids = [set(p.subject_ids()) for p in parts]
            assert ids[0] | ids[1] | ids[2] == all_ids
            assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_paper_scale_sizes(self):
        cohort = generate_synthetic_cohort(SynthConfig(n_subjects=2200, visits_per_subject=(1, 1), seed=0))
        train, val, test = split_cohort(cohort, (1600 / 2200, 200 / 2200, 400 / 2200), seed=4)
        assert (len(train), len(val), len(test)) == (1600, 200, 400)

    def test_too_small(self):
        cohort = generate_synthetic_cohort(SynthConfig(n_subjects=2, seed=0))
        with pytest.raises(SplitError):
            split_cohort(cohort, (0.5, 0.25, 0.25), seed=0)

    def test_deterministic(self):
        cohort = generate_synthetic_cohort(SynthConfig(n_subjects=9, seed=6))
        a = split_cohort(cohort, (0.5, 0.25, 0.25), seed=42)
        b = split_cohort(cohort, (0.5, 0.25, 0.25), seed=42)
        assert [p.subject_ids() for p in a] == [p.subject_ids() for p in b]


class TestTruncate:
    def subject(self, n):
        visits = tuple(Visit(12.0 * i, 1.0 - 0.05 * i) for i in range(n))
        return SubjectRecord("s", np.zeros(3), np.zeros(2), visits)

    def test_counts(self):
        observed, heldout = truncate_history(self.subject(5), 2)
        assert observed.n_visits == 2 and heldout.n_visits == 3
        assert observed.visits[-1].time_months == 12.0
        assert heldout.visits[0].time_months == 24.0

    def test_last_followup_reserved(self):
        observed, heldout = truncate_history(self.subject(5), 4)
        assert heldout.n_visits == 1

    def test_out_of_range(self):
        with pytest.raises(HistoryError):
            truncate_history(self.subject(5), 5)
        with pytest.raises(HistoryError):
            truncate_history(self.subject(5), 0)


class TestTypes:
    def test_visits_sorted_required(self):
        with pytest.raises(ParseError):
            SubjectRecord("s", np.zeros(1), np.zeros(1), (Visit(12.0, 1.0), Visit(0.0, 1.0)))

    def test_duplicate_times_rejected(self):
        with pytest.raises(DuplicateVisitError):
            SubjectRecord("s", np.zeros(1), np.zeros(1), (Visit(6.0, 1.0), Visit(6.0, 2.0)))

    def test_unique_subject_ids(self):
        s = SubjectRecord("dup", np.zeros(1), np.zeros(1), (Visit(0.0, 1.0),))
        with pytest.raises(SchemaError):
            Cohort((s, s), 1, 1)

    def test_arrays_read_only(self):
        s = SubjectRecord("s", np.zeros(2), np.zeros(1), (Visit(0.0, 1.0),))
        with pytest.raises(ValueError):
            s.baseline_features[0] = 5.0
