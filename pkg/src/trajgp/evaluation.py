"""Benchmark metrics over a test cohort.

Per subject: truncate the trajectory at a history length, personalize, and
score the held-out visits. Accuracy is absolute error at each held-out
visit; uncertainty is scored by the +/- 2 standard deviation band (coverage
= fraction of true values inside it, interval width = its full width).
Aggregates are per-subject means with a seeded percentile bootstrap CI,
plus error-versus-horizon buckets, per-history alpha summaries, covariate
strata, and the correlation between observation time and predicted alpha
on the large-deviation instances.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Cohort, SubjectRecord, truncate_history
from .deep_kernel import PosteriorCurve
from .errors import BenchmarkError, GridCoverageError
from .numerics import make_rng, single_thread_blas
from .shrinkage import AlphaEstimator, personalize_full, trajectory_grid
from .population import PopulationModel

TIME_BUCKET_MONTHS = 6.0
BOOTSTRAP_RESAMPLES = 1000
LARGE_DEVIATION_PERCENTILE = 75.0
# Covariate columns reported as strata: (name, column index) in the synthetic
# covariate layout [age, sex, diagnosis, risk_alleles, education].
DEFAULT_STRATA = (("sex", 1), ("risk_alleles", 3), ("education", 4))


@dataclass(frozen=True)
class CurveMetrics:
    mae: float
    coverage: float
    mean_interval_width: float
    ae_by_time: dict[int, float]
    n_heldout: int
    abs_errors: np.ndarray


@dataclass(frozen=True)
class AlphaRecord:
    """One (subject, history) evaluation row; also the CSV row."""

    subject_id: str
    h: int
    alpha: float
    mae: float
    coverage: float
    width: float
    t_obs: float
    mean_yp: float
    mean_ys: float


@dataclass
class EvalReport:
    per_subject: dict[str, dict]
    aggregate: dict[str, float]
    ae_by_time_bucket: dict[int, float]
    alpha_by_h: dict[int, tuple[float, float]]
    strata: dict[str, dict]
    alpha_tobs_correlation_large_dev: float | None
    records: list[AlphaRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def evaluate_curve(curve: PosteriorCurve, heldout: SubjectRecord, t_obs: float = 0.0) -> CurveMetrics:
    """Score a posterior curve at the held-out visits (exact grid membership)."""
    index = {t: i for i, t in enumerate(curve.times)}
    errors, covered, widths = [], [], []
    ae_buckets: dict[int, list[float]] = {}
    for visit in heldout.visits:
        if visit.time_months not in index:
            raise GridCoverageError(f"held-out time {visit.time_months:g} not on the curve grid")
        i = index[visit.time_months]
        err = abs(curve.mean[i] - visit.value)
        sd = math.sqrt(curve.variance[i])
        errors.append(err)
        covered.append(err <= 2.0 * sd)
        widths.append(4.0 * sd)
        bucket = int(math.floor((visit.time_months - t_obs) / TIME_BUCKET_MONTHS) * TIME_BUCKET_MONTHS)
        ae_buckets.setdefault(bucket, []).append(err)
    errors = np.array(errors)
    return CurveMetrics(
        mae=float(errors.mean()),
        coverage=float(np.mean(covered)),
        mean_interval_width=float(np.mean(widths)),
        ae_by_time={b: float(np.mean(v)) for b, v in ae_buckets.items()},
        n_heldout=len(heldout.visits),
        abs_errors=errors,
    )


def alpha_correlation_analysis(records: list[AlphaRecord]) -> float | None:
    """Correlation of t_obs with predicted alpha on large-deviation records.

    "Large" means |mean_yp - mean_ys| above its 75th percentile. Returns None
    (analysis skipped) with fewer than 20 records; a zero-variance side makes
    the correlation 0 by convention.
    """
    if len(records) < 20:
        return None
    dev = np.array([abs(r.mean_yp - r.mean_ys) for r in records])
    cut = np.percentile(dev, LARGE_DEVIATION_PERCENTILE)
    keep = dev > cut
    t_obs = np.array([r.t_obs for r in records])[keep]
    alpha = np.array([r.alpha for r in records])[keep]
    if t_obs.size < 2 or t_obs.std() == 0.0 or alpha.std() == 0.0:
        return 0.0
    return float(np.mean((t_obs - t_obs.mean()) * (alpha - alpha.mean())) / (t_obs.std() * alpha.std()))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def _subject_task(
    pop: PopulationModel,
    est: AlphaEstimator,
    subject: SubjectRecord,
    h_values: list[int],
    variance_mode: str,
    grid_step: float,
) -> list[tuple[AlphaRecord, CurveMetrics]]:
    out = []
    for h in h_values:
        if subject.n_visits <= h:
            continue
        observed, heldout = truncate_history(subject, h)
        grid = trajectory_grid(float(subject.times[-1]), subject.times, grid_step)
        res = personalize_full(pop, est, observed, grid, variance_mode)
        t_obs = float(observed.visits[-1].time_months)
        metrics = evaluate_curve(res.curve, heldout, t_obs)
        feats = res.features
        record = AlphaRecord(
            subject_id=subject.subject_id,
            h=h,
            alpha=res.alpha,
            mae=metrics.mae,
            coverage=metrics.coverage,
            width=metrics.mean_interval_width,
            t_obs=t_obs,
            mean_yp=feats.mean_yp if feats else float(res.population_curve.mean.mean()),
            mean_ys=feats.mean_ys if feats else float(res.population_curve.mean.mean()),
        )
        out.append((record, metrics))
    return out


_worker_ctx: tuple[PopulationModel, AlphaEstimator] | None = None


def _init_bench_worker(pop: PopulationModel, est: AlphaEstimator):
    global _worker_ctx
    _worker_ctx = (pop, est)


def _bench_task(args):
    subject, h_values, variance_mode, grid_step = args
    pop, est = _worker_ctx
    with single_thread_blas():
        return _subject_task(pop, est, subject, h_values, variance_mode, grid_step)


def run_benchmark(
    pop: PopulationModel,
    est: AlphaEstimator,
    test: Cohort,
    h,
    variance_mode: str = "independent",
    grid_step_months: float = 6.0,
    strata=DEFAULT_STRATA,
    bootstrap_seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Personalize and score every test subject at the given history length(s)."""
    h_values = [h] if isinstance(h, int) else sorted(set(int(v) for v in h))
    known = set(pop.train_subject_ids) | set(est.validation_subject_ids)
    leaked = known & set(test.subject_ids())
    if leaked:
        raise BenchmarkError(f"split leakage: {sorted(leaked)[:5]} appear in training or validation")

    subjects = sorted(test.subjects, key=lambda s: s.subject_id)
    if workers > 1 and len(subjects) > 1:
        tasks = [(s, h_values, variance_mode, grid_step_months) for s in subjects]
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_bench_worker, initargs=(pop, est)
        ) as pool:
            chunks = list(pool.map(_bench_task, tasks))
    else:
        with single_thread_blas():
            chunks = [_subject_task(pop, est, s, h_values, variance_mode, grid_step_months) for s in subjects]

    records: list[AlphaRecord] = []
    per_subject: dict[str, dict] = {}
    bucket_errors: dict[int, list[float]] = {}
    subject_cov: dict[str, list[float]] = {}
    subject_width: dict[str, list[float]] = {}
    subject_errors: dict[str, list[np.ndarray]] = {}
    for subject, chunk in zip(subjects, chunks):
        for record, metrics in chunk:
            records.append(record)
            info = per_subject.setdefault(
                record.subject_id, {"mae": 0.0, "n_heldout": 0, "alpha_by_h": {}}
            )
            info["alpha_by_h"][record.h] = record.alpha
            info["n_heldout"] += metrics.n_heldout
            subject_errors.setdefault(record.subject_id, []).append(metrics.abs_errors)
            subject_cov.setdefault(record.subject_id, []).append(metrics.coverage)
            subject_width.setdefault(record.subject_id, []).append(metrics.mean_interval_width)
            for bucket, val in metrics.ae_by_time.items():
                bucket_errors.setdefault(bucket, []).append(val)
    if not records:
        raise BenchmarkError("no test subject has more visits than the requested history")

    for sid, chunks_err in subject_errors.items():
        per_subject[sid]["mae"] = float(np.concatenate(chunks_err).mean())

    sids = sorted(per_subject)
    maes = np.array([per_subject[s]["mae"] for s in sids])
    coverages = np.array([float(np.mean(subject_cov[s])) for s in sids])
    widths = np.array([float(np.mean(subject_width[s])) for s in sids])
    aggregate = {
        "mean_mae": float(maes.mean()),
        "mae_ci95": _bootstrap_ci(maes, bootstrap_seed),
        "mean_coverage": float(coverages.mean()),
        "mean_interval_width": float(widths.mean()),
    }

    alpha_by_h: dict[int, tuple[float, float]] = {}
    for hv in h_values:
        vals = np.array([r.alpha for r in records if r.h == hv])
        if vals.size:
            alpha_by_h[hv] = (float(vals.mean()), float(vals.std()))

    strata_report: dict[str, dict] = {}
    by_id = {s.subject_id: s for s in subjects}
    for name, col in strata:
        groups: dict[str, list[str]] = {}
        for sid in sids:
            key = f"{name}={by_id[sid].covariates[col]:g}"
            groups.setdefault(key, []).append(sid)
        for key, members in sorted(groups.items()):
            idx = [sids.index(m) for m in members]
            strata_report[key] = {
                "n_subjects": len(members),
                "mean_mae": float(maes[idx].mean()),
                "mean_coverage": float(coverages[idx].mean()),
                "mean_interval_width": float(widths[idx].mean()),
            }

    return EvalReport(
        per_subject=per_subject,
        aggregate=aggregate,
        ae_by_time_bucket={b: float(np.mean(v)) for b, v in sorted(bucket_errors.items())},
        alpha_by_h=alpha_by_h,
        strata=strata_report,
        alpha_tobs_correlation_large_dev=alpha_correlation_analysis(records),
        records=records,
        config={
            "h": h_values,
            "variance_mode": variance_mode,
            "grid_step_months": grid_step_months,
            "bootstrap_seed": bootstrap_seed,
            "large_deviation_percentile": LARGE_DEVIATION_PERCENTILE,
        },
    )


def run_alpha_ablation(
    pop: PopulationModel,
    est: AlphaEstimator,
    test: Cohort,
    h: int,
    constants=tuple(round(c / 10, 1) for c in range(11)),
    grid_step_months: float = 6.0,
) -> dict:
    """Mean MAE of adaptive, deterministic, and constant alpha policies.

    The two component curves are computed once per subject and recombined
    per policy, so the sweep costs one personalization per subject. Keys:
    "adaptive", "deterministic", and each constant (as a float).
    """
    from .shrinkage import combine_posterior, oracle_alpha

    known = set(pop.train_subject_ids) | set(est.validation_subject_ids)
    leaked = known & set(test.subject_ids())
    if leaked:
        raise BenchmarkError(f"split leakage: {sorted(leaked)[:5]} appear in training or validation")

    per_policy: dict = {"adaptive": [], "deterministic": []}
    for c in constants:
        per_policy[float(c)] = []
    with single_thread_blas():
        for subject in sorted(test.subjects, key=lambda s: s.subject_id):
            if subject.n_visits <= h:
                continue
            observed, heldout = truncate_history(subject, h)
            grid = trajectory_grid(float(subject.times[-1]), subject.times, grid_step_months)
            res = personalize_full(pop, est, observed, grid, "independent")
            idx = {t: i for i, t in enumerate(grid)}
            held_idx = [idx[v.time_months] for v in heldout.visits]
            obs_idx = [idx[v.time_months] for v in observed.visits]
            truth = heldout.values
            yp = res.population_curve.mean
            ys = res.subject_curve.mean
            per_policy["adaptive"].append(float(np.abs(res.curve.mean[held_idx] - truth).mean()))
            det_alpha = oracle_alpha(observed.values, yp[obs_idx], ys[obs_idx])
            for key, alpha in [("deterministic", det_alpha)] + [(float(c), float(c)) for c in constants]:
                yc, _ = combine_posterior(
                    yp, res.population_curve.variance, ys, res.subject_curve.variance, alpha
                )
                per_policy[key].append(float(np.abs(yc[held_idx] - truth).mean()))
    if not per_policy["adaptive"]:
        raise BenchmarkError("no test subject has more visits than the requested history")
    return {key: float(np.mean(v)) for key, v in per_policy.items()}


def _bootstrap_ci(values: np.ndarray, seed: int) -> float:
    """Half-width of the 95% percentile bootstrap CI of the mean."""
    rng = make_rng(seed)
    idx = rng.integers(0, values.size, size=(BOOTSTRAP_RESAMPLES, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float((hi - lo) / 2.0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def report_to_json(report: EvalReport) -> str:
    doc = {
        "aggregate": report.aggregate,
        "per_subject": report.per_subject,
        "ae_by_time_bucket": {str(k): v for k, v in report.ae_by_time_bucket.items()},
        "alpha_by_h": {str(k): list(v) for k, v in report.alpha_by_h.items()},
        "strata": report.strata,
        "alpha_tobs_correlation_large_dev": report.alpha_tobs_correlation_large_dev,
        "config": report.config,
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report_to_json(report) + "\n", encoding="utf-8")


def save_report_csv(report: EvalReport, path: str | Path) -> None:
    lines = ["subject_id,h,alpha,mae,coverage,width"]
    for r in report.records:
        lines.append(f"{r.subject_id},{r.h},{r.alpha:.9g},{r.mae:.9g},{r.coverage:.9g},{r.width:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
