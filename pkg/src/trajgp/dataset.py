"""Cohort data model, CSV ingestion, splitting, and the synthetic generator.

A cohort is a list of subjects; each subject carries baseline imaging-style
features, numerically encoded covariates, and a time-ordered visit list with
times in months from the first visit. The synthetic generator stands in for
restricted clinical data: it draws each subject from one of three latent
progression classes whose trajectory templates make the baseline features
predictive of the future trend. Feature 0 is a noisy baseline measurement of
the target biomarker itself (real imaging panels include the predicted
region), so a population model can anchor each subject's level; the rest are
class-informative at unit signal-to-noise.

Cohort CSV schema (UTF-8, comma separated, header required)::

    subject_id,time_months,y,x_0,...,x_{D-1},c_0,...,c_{C-1},label

One row per visit; features and covariates are repeated identically on every
row of a subject and validated on load. `label` is one of
stable/slow/fast/unknown. Times are re-based per subject so the first visit
sits at month 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateVisitError,
    EmptyCohortError,
    HistoryError,
    ParseError,
    SchemaError,
    SplitError,
)
from .numerics import make_rng


class ProgressionLabel(str, Enum):
    STABLE = "stable"
    SLOW = "slow"
    FAST = "fast"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Visit:
    """One biomarker measurement: months since the subject's first visit, raw value."""

    time_months: float
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.time_months) and self.time_months >= 0):
            raise ParseError(f"visit time must be finite and >= 0, got {self.time_months}")
        if not math.isfinite(self.value):
            raise ParseError(f"visit value must be finite, got {self.value}")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: baseline features, covariates, and an ordered visit list.

    Visits are strictly increasing in time. A freshly ingested or generated
    record starts at month 0; the heldout half of a truncation keeps its
    original (later) times.
    """

    subject_id: str
    baseline_features: np.ndarray
    covariates: np.ndarray
    visits: tuple[Visit, ...]
    progression_label: ProgressionLabel = ProgressionLabel.UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "baseline_features", _frozen_array(self.baseline_features))
        object.__setattr__(self, "covariates", _frozen_array(self.covariates))
        object.__setattr__(self, "visits", tuple(self.visits))
        if len(self.visits) < 1:
            raise ParseError(f"subject {self.subject_id} has no visits")
        times = [v.time_months for v in self.visits]
        for a, b in zip(times, times[1:]):
            if b == a:
                raise DuplicateVisitError(f"subject {self.subject_id} has duplicate visit time {a}")
            if b < a:
                raise ParseError(f"subject {self.subject_id} visits not sorted by time")
        if not (np.isfinite(self.baseline_features).all() and np.isfinite(self.covariates).all()):
            raise ParseError(f"subject {self.subject_id} has non-finite features")

    @property
    def times(self) -> np.ndarray:
        return np.array([v.time_months for v in self.visits])

    @property
    def values(self) -> np.ndarray:
        return np.array([v.value for v in self.visits])

    @property
    def n_visits(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[SubjectRecord, ...]
    feature_dim: int
    covariate_dim: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        ids = set()
        for s in self.subjects:
            if s.subject_id in ids:
                raise SchemaError(f"duplicate subject_id {s.subject_id}")
            ids.add(s.subject_id)
            if s.baseline_features.shape != (self.feature_dim,):
                raise SchemaError(f"subject {s.subject_id} has feature dim {s.baseline_features.size}, expected {self.feature_dim}")
            if s.covariates.shape != (self.covariate_dim,):
                raise SchemaError(f"subject {s.subject_id} has covariate dim {s.covariates.size}, expected {self.covariate_dim}")

    def __len__(self) -> int:
        return len(self.subjects)

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic longitudinal cohort generator."""

    n_subjects: int
    feature_dim: int = 20
    visits_per_subject: tuple[int, int] = (4, 8)
    visit_spacing_months: tuple[float, float] = (6.0, 18.0)
    class_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ParseError(f"class_mix must sum to 1, got {sum(self.class_mix)}")
        if self.visits_per_subject[0] > self.visits_per_subject[1] or self.visits_per_subject[0] < 1:
            raise ParseError(f"empty visit-count range {self.visits_per_subject}")
        if self.visit_spacing_months[0] > self.visit_spacing_months[1] or self.visit_spacing_months[0] <= 0:
            raise ParseError(f"empty visit-spacing range {self.visit_spacing_months}")
        if self.noise_sd <= 0:
            raise ParseError("noise_sd must be > 0")


def _frozen_array(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Synthetic trajectory templates
# ---------------------------------------------------------------------------

# Class mean offsets applied to every class-informative feature coordinate;
# separation 1.0 against unit feature noise (signal-to-noise 1.0, documented
# constant).
_CLASS_FEATURE_OFFSET = {
    ProgressionLabel.STABLE: -1.0,
    ProgressionLabel.SLOW: 0.0,
    ProgressionLabel.FAST: 1.0,
}
_CLASS_ORDER = (ProgressionLabel.STABLE, ProgressionLabel.SLOW, ProgressionLabel.FAST)
N_COVARIATES = 5  # age, sex, diagnosis, risk alleles, education
# Feature 0 is the target biomarker measured at baseline (imaging panels
# include the predicted region), observed with this measurement noise.
BASELINE_FEATURE_NOISE_SD = 0.1


@dataclass(frozen=True)
class TrajectoryParams:
    """Noiseless per-subject template: value(t) for t in months."""

    label: ProgressionLabel
    level: float
    slope_per_year: float = 0.0
    ramp_size: float = 0.0
    ramp_midpoint_months: float = 0.0
    ramp_width_months: float = 1.0

    def value(self, t: float) -> float:
        if self.label is ProgressionLabel.SLOW:
            return self.level - self.slope_per_year * t / 12.0
        if self.label is ProgressionLabel.FAST:
            ramp = self.ramp_size / (1.0 + math.exp(-(t - self.ramp_midpoint_months) / self.ramp_width_months))
            return self.level - ramp
        return self.level


def sample_trajectory_params(rng: np.random.Generator, label: ProgressionLabel) -> TrajectoryParams:
    """Draw one subject's noiseless template for the given class.

    Fast progressors use a logistic ramp with asymptote in [0.9, 1.6] and
    width in [3, 5] months so the template always drops by at least 0.8
    between month 0 and month 120.
    """
    level = rng.normal(0.0, 0.5)
    if label is ProgressionLabel.SLOW:
        return TrajectoryParams(label, level, slope_per_year=rng.uniform(0.05, 0.15))
    if label is ProgressionLabel.FAST:
        return TrajectoryParams(
            label,
            level,
            ramp_size=rng.uniform(0.9, 1.6),
            ramp_midpoint_months=rng.uniform(18.0, 60.0),
            ramp_width_months=rng.uniform(3.0, 5.0),
        )
    return TrajectoryParams(label, level)


def generate_synthetic_cohort(config: SynthConfig) -> Cohort:
    """Deterministic synthetic cohort: same config and seed, same bytes."""
    if config.n_subjects < 1:
        raise EmptyCohortError("n_subjects must be >= 1")
    rng = make_rng(config.seed)
    id_width = max(4, len(str(config.n_subjects - 1)))
    subjects = []
    for i in range(config.n_subjects):
        label = _CLASS_ORDER[rng.choice(3, p=np.asarray(config.class_mix))]
        params = sample_trajectory_params(rng, label)

        lo, hi = config.visits_per_subject
        n_visits = int(rng.integers(lo, hi + 1))
        spacings = rng.uniform(*config.visit_spacing_months, size=n_visits - 1)
        times = np.concatenate([[0.0], np.cumsum(spacings)])
        noise = rng.normal(0.0, config.noise_sd, size=n_visits)
        visits = tuple(Visit(float(t), params.value(float(t)) + float(e)) for t, e in zip(times, noise))

        features = _CLASS_FEATURE_OFFSET[label] + rng.normal(0.0, 1.0, size=config.feature_dim)
        features[0] = params.level + rng.normal(0.0, BASELINE_FEATURE_NOISE_SD)
        covariates = np.array([
            rng.uniform(55.0, 85.0),        # age at baseline
            float(rng.integers(0, 2)),      # sex
            float(rng.integers(0, 3)),      # diagnosis, ordinal
            float(rng.integers(0, 3)),      # risk-allele count
            float(rng.integers(0, 2)),      # education flag
        ])
        subjects.append(SubjectRecord(f"s{i:0{id_width}d}", features, covariates, visits, label))
    return Cohort(tuple(subjects), config.feature_dim, N_COVARIATES)


# ---------------------------------------------------------------------------
# CSV ingestion / serialization
# ---------------------------------------------------------------------------

def _expected_header(feature_dim: int, covariate_dim: int) -> list[str]:
    return (
        ["subject_id", "time_months", "y"]
        + [f"x_{i}" for i in range(feature_dim)]
        + [f"c_{i}" for i in range(covariate_dim)]
        + ["label"]
    )


def _parse_header(header: list[str]) -> tuple[int, int]:
    d = sum(1 for h in header if h.startswith("x_"))
    c = sum(1 for h in header if h.startswith("c_"))
    expected = _expected_header(d, c)
    for col in expected:
        if col not in header:
            raise SchemaError(col)
    if header != expected:
        raise SchemaError(f"columns out of order, expected {expected[:4]}...")
    return d, c


def load_cohort_csv(path: str | Path) -> Cohort:
    """Load a cohort file, re-basing each subject's times so t0 = 0."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file, header required") from None
        d, c = _parse_header(header)

        per_subject: dict[str, dict] = {}
        order: list[str] = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            sid = row[0]
            try:
                t = float(row[1])
                y = float(row[2])
                x = np.array([float(v) for v in row[3 : 3 + d]])
                cov = np.array([float(v) for v in row[3 + d : 3 + d + c]])
            except ValueError as exc:
                raise ParseError(f"row {row_no}: {exc}") from None
            if not (math.isfinite(t) and math.isfinite(y) and np.isfinite(x).all() and np.isfinite(cov).all()):
                raise ParseError(f"row {row_no}: non-finite value")
            try:
                label = ProgressionLabel(row[3 + d + c])
            except ValueError:
                raise ParseError(f"row {row_no}: unknown label {row[3 + d + c]!r}") from None

            if sid not in per_subject:
                per_subject[sid] = {"x": x, "cov": cov, "label": label, "rows": [], "times": set()}
                order.append(sid)
            rec = per_subject[sid]
            if not (np.array_equal(rec["x"], x) and np.array_equal(rec["cov"], cov)):
                raise SchemaError(f"row {row_no}: subject {sid} repeats with different features/covariates")
            if t in rec["times"]:
                raise DuplicateVisitError(f"row {row_no}: duplicate time {t:g} for subject {sid}")
            rec["times"].add(t)
            rec["rows"].append((t, y))

    if not order:
        raise EmptyCohortError(f"{path} contains no visit rows")
    subjects = []
    for sid in order:
        rec = per_subject[sid]
        rows = sorted(rec["rows"])
        t0 = rows[0][0]
        visits = tuple(Visit(t - t0, y) for t, y in rows)
        subjects.append(SubjectRecord(sid, rec["x"], rec["cov"], visits, rec["label"]))
    return Cohort(tuple(subjects), d, c)


def save_cohort_csv(cohort: Cohort, path: str | Path) -> None:
    """Write a cohort with all floats at 9 significant digits."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_expected_header(cohort.feature_dim, cohort.covariate_dim))
    for s in cohort.subjects:
        x = [f"{v:.9g}" for v in s.baseline_features]
        cov = [f"{v:.9g}" for v in s.covariates]
        for visit in s.visits:
            writer.writerow([s.subject_id, f"{visit.time_months:.9g}", f"{visit.value:.9g}"]
                            + x + cov + [s.progression_label.value])
    path.write_text(buf.getvalue(), encoding="utf-8")


def cohort_to_bytes(cohort: Cohort) -> bytes:
    """Canonical CSV bytes (what save_cohort_csv writes)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_expected_header(cohort.feature_dim, cohort.covariate_dim))
    for s in cohort.subjects:
        x = [f"{v:.9g}" for v in s.baseline_features]
        cov = [f"{v:.9g}" for v in s.covariates]
        for visit in s.visits:
            writer.writerow([s.subject_id, f"{visit.time_months:.9g}", f"{visit.value:.9g}"]
                            + x + cov + [s.progression_label.value])
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# Splitting and history truncation
# ---------------------------------------------------------------------------

def split_cohort(
    cohort: Cohort, fractions: tuple[float, float, float], seed: int
) -> tuple[Cohort, Cohort, Cohort]:
    """Partition at subject granularity into (train, val, test).

    Validation and test sizes round to nearest; the remainder goes to train.
    """
    if len(cohort) < 3:
        raise SplitError(f"need at least 3 subjects to split, got {len(cohort)}")
    if min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise SplitError(f"fractions must be positive and sum to 1, got {fractions}")

    n = len(cohort)
    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_test = int(math.floor(n * fractions[2] + 0.5))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise SplitError(f"fractions {fractions} leave no training subjects for n={n}")

    perm = make_rng(seed).permutation(n)
    subs = cohort.subjects

    def take(idx) -> Cohort:
        return Cohort(tuple(subs[i] for i in sorted(idx)), cohort.feature_dim, cohort.covariate_dim)

    return (
        take(perm[:n_train]),
        take(perm[n_train : n_train + n_val]),
        take(perm[n_train + n_val :]),
    )


def truncate_history(subject: SubjectRecord, h: int) -> tuple[SubjectRecord, SubjectRecord]:
    """Split a subject's visits into the first h (observed) and the rest (heldout).

    The heldout record keeps the original time stamps; both halves share the
    subject's features and covariates.
    """
    if not 1 <= h < subject.n_visits:
        raise HistoryError(f"h={h} outside 1 <= h < {subject.n_visits} for subject {subject.subject_id}")
    observed = SubjectRecord(
        subject.subject_id, subject.baseline_features, subject.covariates,
        subject.visits[:h], subject.progression_label,
    )
    heldout = SubjectRecord(
        subject.subject_id, subject.baseline_features, subject.covariates,
        subject.visits[h:], subject.progression_label,
    )
    return observed, heldout
