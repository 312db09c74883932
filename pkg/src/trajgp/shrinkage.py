"""Shrinkage weight estimation and posterior combination.

The personalized curve blends the population and subject posteriors with a
weight alpha in [0, 1]. On a validation cohort with known futures, the best
alpha per (subject, history length) has a closed form: the objective is a
convex quadratic, so the clamped stationary point is the constrained argmin.
Those oracle weights train a gradient-boosted tree regressor over five
summary features (grid means of both predictive means and variances, plus
the elapsed observation time). Combination supports an independent-errors
variance and a covariance-corrected variance using pooled validation
correlations between the two models' errors.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boosting import (
    BoostedTrees,
    GbtConfig,
    TreeNode,
    fit_boosted_trees,
    predict_boosted_trees,
)
from .dataset import Cohort, SubjectRecord, truncate_history
from .deep_kernel import PosteriorCurve
from .errors import BenchmarkError, FormatError, ParameterError, ParseError, ShapeError
from .numerics import single_thread_blas
from .population import PopulationModel, TrainConfig, predict_population
from .subject import SubjectModel, fit_subject, predict_subject

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("mean_yp", "mean_ys", "mean_vp", "mean_vs", "t_obs")
ESTIMATOR_FORMAT = "trajgp-alpha-estimator"
ESTIMATOR_VERSION = 1


@dataclass(frozen=True)
class ShrinkageFeatures:
    """Five-dim summary of one personalization instance."""

    mean_yp: float
    mean_ys: float
    mean_vp: float
    mean_vs: float
    t_obs: float

    def __post_init__(self):
        if self.mean_vp < 0 or self.mean_vs < 0:
            raise ShapeError("mean variances must be >= 0")
        if self.t_obs < 0:
            raise ShapeError("t_obs must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_yp, self.mean_ys, self.mean_vp, self.mean_vs, self.t_obs])


@dataclass(frozen=True)
class AlphaTrainingRow:
    features: ShrinkageFeatures
    oracle_alpha: float
    subject_id: str
    h: int

    def __post_init__(self):
        if not 0.0 <= self.oracle_alpha <= 1.0:
            raise ParameterError(f"oracle_alpha {self.oracle_alpha} outside [0, 1]")


@dataclass
class AlphaEstimator:
    """Boosted-tree alpha regressor plus per-history error correlations."""

    model: BoostedTrees
    config: GbtConfig
    feature_importance: dict[str, float] = field(default_factory=dict)
    error_correlation_by_h: dict[int, float] = field(default_factory=dict)
    validation_subject_ids: list[str] = field(default_factory=list)


def oracle_alpha(truth: np.ndarray, yp: np.ndarray, ys: np.ndarray) -> float:
    """Closed-form argmin of sum_t (y_t - (a yp_t + (1-a) ys_t))^2 over [0, 1].

    Returns 1.0 by convention when the two predictors coincide.
    """
    truth = np.asarray(truth, dtype=float)
    yp = np.asarray(yp, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if not truth.shape == yp.shape == ys.shape or truth.size < 1:
        raise ShapeError(f"oracle_alpha needs equal nonempty shapes, got {truth.shape}, {yp.shape}, {ys.shape}")
    diff = yp - ys
    denom = float(diff @ diff)
    if denom == 0.0:
        return 1.0
    alpha = float((truth - ys) @ diff / denom)
    return min(1.0, max(0.0, alpha))


def combine_posterior(
    yp: np.ndarray,
    vp: np.ndarray,
    ys: np.ndarray,
    vs: np.ndarray,
    alpha: float,
    rho: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Blend the two posteriors: mean convexly, variance per the error model.

    rho=None assumes independent errors; otherwise the cross term
    2 a (1-a) rho sqrt(vp vs) is added and the result clamped at 0.
    """
    yp, vp, ys, vs = (np.asarray(v, dtype=float) for v in (yp, vp, ys, vs))
    if not yp.shape == vp.shape == ys.shape == vs.shape:
        raise ShapeError("combine_posterior arrays must share a shape")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha {alpha} outside [0, 1]")
    if (vp < 0).any() or (vs < 0).any():
        raise ParameterError("variances must be >= 0")
    yc = alpha * yp + (1.0 - alpha) * ys
    vc = alpha**2 * vp + (1.0 - alpha) ** 2 * vs
    if rho is not None:
        if not -1.0 <= rho <= 1.0:
            raise ParameterError(f"correlation {rho} outside [-1, 1]")
        vc = vc + 2.0 * alpha * (1.0 - alpha) * rho * np.sqrt(vp * vs)
    return yc, np.maximum(vc, 0.0)


# ---------------------------------------------------------------------------
# Validation sweep shared by the alpha dataset and the correlation estimate
# ---------------------------------------------------------------------------

def trajectory_grid(last_time: float, visit_times: np.ndarray, step: float) -> np.ndarray:
    """Dense grid from 0 to last_time, always containing the visit times."""
    dense = np.arange(0.0, last_time + 1e-9, step)
    return np.union1d(dense, np.asarray(visit_times, dtype=float))


@dataclass(frozen=True)
class HistoryRecord:
    """Everything one (subject, h) validation sweep step produced."""

    subject_id: str
    h: int
    features: ShrinkageFeatures
    oracle: float
    pop_errors_heldout: np.ndarray
    subj_errors_heldout: np.ndarray


def _history_values(subject: SubjectRecord, h_range) -> list[int]:
    if h_range is None:
        return list(range(2, subject.n_visits))
    return [h for h in h_range if h < subject.n_visits]


def _sweep_subject(
    pop: PopulationModel, subject: SubjectRecord, h_range, grid_step: float
) -> list[HistoryRecord]:
    records = []
    visit_times = subject.times
    values = subject.values
    grid = trajectory_grid(float(visit_times[-1]), visit_times, grid_step)
    pop_curve = predict_population(pop, subject, grid)
    at_visits = np.searchsorted(grid, visit_times)
    for h in _history_values(subject, h_range):
        if h < 1:
            continue
        observed, _ = truncate_history(subject, h)
        sm = fit_subject(pop, observed)
        subj_curve = predict_subject(sm, pop, subject, grid)
        yp_v = pop_curve.mean[at_visits]
        ys_v = subj_curve.mean[at_visits]
        records.append(
            HistoryRecord(
                subject_id=subject.subject_id,
                h=h,
                features=ShrinkageFeatures(
                    float(pop_curve.mean.mean()),
                    float(subj_curve.mean.mean()),
                    float(pop_curve.variance.mean()),
                    float(subj_curve.variance.mean()),
                    float(observed.visits[-1].time_months),
                ),
                oracle=oracle_alpha(values, yp_v, ys_v),
                pop_errors_heldout=yp_v[h:] - values[h:],
                subj_errors_heldout=ys_v[h:] - values[h:],
            )
        )
    return records


_worker_pop: PopulationModel | None = None


def _init_sweep_worker(pop: PopulationModel):
    global _worker_pop
    _worker_pop = pop


def _sweep_task(args) -> list[HistoryRecord]:
    subject, h_range, grid_step = args
    with single_thread_blas():
        return _sweep_subject(_worker_pop, subject, h_range, grid_step)


def _check_disjoint(pop: PopulationModel, validation: Cohort):
    if pop.train_subject_ids:
        overlap = set(pop.train_subject_ids) & set(validation.subject_ids())
        if overlap:
            raise BenchmarkError(f"split leakage: {sorted(overlap)[:5]} appear in the population training set")


def sweep_validation(
    pop: PopulationModel,
    validation: Cohort,
    h_range=None,
    grid_step_months: float = 6.0,
    workers: int = 1,
) -> list[HistoryRecord]:
    """Run the per-(subject, h) validation sweep, deterministically ordered."""
    _check_disjoint(pop, validation)
    min_h = 2 if h_range is None else min(h_range)
    usable = [s for s in validation.subjects if s.n_visits >= min_h + 1]
    skipped = len(validation) - len(usable)
    if skipped:
        logger.info("validation sweep skipped %d subjects with fewer than %d visits", skipped, min_h + 1)

    if workers > 1 and len(usable) > 1:
        tasks = [(s, h_range, grid_step_months) for s in usable]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_sweep_worker, initargs=(pop,)) as pool:
            chunks = list(pool.map(_sweep_task, tasks))
    else:
        with single_thread_blas():
            chunks = [_sweep_subject(pop, s, h_range, grid_step_months) for s in usable]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.subject_id, r.h))
    return records


def build_alpha_dataset(
    pop: PopulationModel,
    validation: Cohort,
    h_range=None,
    grid_step_months: float = 6.0,
    workers: int = 1,
) -> list[AlphaTrainingRow]:
    """Oracle shrinkage rows over every usable (subject, history) pair."""
    return [
        AlphaTrainingRow(r.features, r.oracle, r.subject_id, r.h)
        for r in sweep_validation(pop, validation, h_range, grid_step_months, workers)
    ]


def _correlations_from_records(records: list[HistoryRecord]) -> dict[int, float]:
    pooled: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
    for r in records:
        pooled.setdefault(r.h, []).append((r.pop_errors_heldout, r.subj_errors_heldout))
    out = {}
    for h in sorted(pooled):
        ep = np.concatenate([p for p, _ in pooled[h]])
        es = np.concatenate([s for _, s in pooled[h]])
        if ep.size < 10:
            continue
        out[h] = _pearson(ep, es)
    return out


def estimate_error_correlation(
    pop: PopulationModel,
    validation: Cohort,
    h_range=None,
    grid_step_months: float = 6.0,
    workers: int = 1,
) -> dict[int, float]:
    """Pearson correlation of the two models' held-out errors, per history length.

    History lengths with fewer than 10 pooled error points are omitted.
    """
    return _correlations_from_records(
        sweep_validation(pop, validation, h_range, grid_step_months, workers)
    )


def train_shrinkage_estimator(
    pop: PopulationModel,
    validation: Cohort,
    h_range=None,
    grid_step_months: float = 6.0,
    config: GbtConfig | None = None,
    workers: int = 1,
) -> tuple[AlphaEstimator, list[AlphaTrainingRow]]:
    """One validation sweep feeding both the alpha regressor and the rho map."""
    records = sweep_validation(pop, validation, h_range, grid_step_months, workers)
    rows = [AlphaTrainingRow(r.features, r.oracle, r.subject_id, r.h) for r in records]
    est = gbt_fit(rows, config)
    est.error_correlation_by_h = _correlations_from_records(records)
    est.validation_subject_ids = validation.subject_ids()
    return est, rows


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


# ---------------------------------------------------------------------------
# Alpha regressor
# ---------------------------------------------------------------------------

def gbt_fit(rows: list[AlphaTrainingRow], config: GbtConfig | None = None) -> AlphaEstimator:
    """Fit the boosted-tree alpha regressor on oracle rows."""
    if config is None:
        config = GbtConfig()
    if len(rows) < 2 * config.min_leaf:
        raise ParameterError(f"need at least {2 * config.min_leaf} rows, got {len(rows)}")
    x = np.array([r.features.as_array() for r in rows])
    y = np.array([r.oracle_alpha for r in rows])
    model = fit_boosted_trees(x, y, config)
    importance = {name: float(g) for name, g in zip(FEATURE_NAMES, model.feature_gains)}
    return AlphaEstimator(model=model, config=config, feature_importance=importance)


def gbt_predict(est: AlphaEstimator, features: ShrinkageFeatures) -> float:
    """Predicted alpha, clamped to [0, 1]."""
    raw = float(predict_boosted_trees(est.model, features.as_array()[None, :])[0])
    return min(1.0, max(0.0, raw))


# ---------------------------------------------------------------------------
# Personalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersonalizationResult:
    curve: PosteriorCurve
    alpha: float
    features: ShrinkageFeatures | None
    population_curve: PosteriorCurve
    subject_curve: PosteriorCurve | None
    subject_model: SubjectModel | None


def _nearest_rho(corr_by_h: dict[int, float], h: int) -> float:
    if not corr_by_h:
        logger.warning("covariance mode requested but no error correlations available; using rho=0")
        return 0.0
    key = min(corr_by_h, key=lambda k: (abs(k - h), k))
    return corr_by_h[key]


def personalize_full(
    pop: PopulationModel,
    est: AlphaEstimator,
    observed: SubjectRecord,
    time_grid: np.ndarray,
    variance_mode: str = "independent",
    alpha_policy="adaptive",
    subject_config: TrainConfig | None = None,
) -> PersonalizationResult:
    """Personalization with all intermediates exposed.

    alpha_policy is "adaptive" (the boosted-tree estimator), "deterministic"
    (oracle alpha over the observed visits only), or a constant float.
    """
    if variance_mode not in ("independent", "covariance"):
        raise ParameterError(f"unknown variance_mode {variance_mode!r}")
    time_grid = np.asarray(time_grid, dtype=float)
    pop_curve = predict_population(pop, observed, time_grid)
    if observed.n_visits == 1:
        # Single scan: the population posterior is the personalized answer.
        return PersonalizationResult(pop_curve, 1.0, None, pop_curve, None, None)

    sm = fit_subject(pop, observed, subject_config)
    subj_curve = predict_subject(sm, pop, observed, time_grid)
    features = ShrinkageFeatures(
        float(pop_curve.mean.mean()),
        float(subj_curve.mean.mean()),
        float(pop_curve.variance.mean()),
        float(subj_curve.variance.mean()),
        float(observed.visits[-1].time_months),
    )
    if alpha_policy == "adaptive":
        alpha = gbt_predict(est, features)
    elif alpha_policy == "deterministic":
        obs_times = observed.times
        yp_obs = predict_population(pop, observed, obs_times).mean
        ys_obs = predict_subject(sm, pop, observed, obs_times).mean
        alpha = oracle_alpha(observed.values, yp_obs, ys_obs)
    else:
        alpha = float(alpha_policy)
        if not 0.0 <= alpha <= 1.0:
            raise ParameterError(f"constant alpha {alpha} outside [0, 1]")

    rho = _nearest_rho(est.error_correlation_by_h, observed.n_visits) if variance_mode == "covariance" else None
    yc, vc = combine_posterior(
        pop_curve.mean, pop_curve.variance, subj_curve.mean, subj_curve.variance, alpha, rho
    )
    return PersonalizationResult(
        PosteriorCurve(time_grid, yc, vc), alpha, features, pop_curve, subj_curve, sm
    )


def personalize(
    pop: PopulationModel,
    est: AlphaEstimator,
    observed: SubjectRecord,
    time_grid: np.ndarray,
    variance_mode: str = "independent",
) -> tuple[PosteriorCurve, float]:
    """Personalized posterior curve and the shrinkage weight it used."""
    res = personalize_full(pop, est, observed, time_grid, variance_mode)
    return res.curve, res.alpha


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_alpha_dataset_csv(rows: list[AlphaTrainingRow], path: str | Path) -> None:
    lines = ["subject_id,h,mean_yp,mean_ys,mean_vp,mean_vs,t_obs,alpha"]
    for r in rows:
        f = r.features
        lines.append(
            f"{r.subject_id},{r.h},{f.mean_yp:.9g},{f.mean_ys:.9g},"
            f"{f.mean_vp:.9g},{f.mean_vs:.9g},{f.t_obs:.9g},{r.oracle_alpha:.9g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def estimator_to_json(est: AlphaEstimator) -> str:
    doc = {
        "format": ESTIMATOR_FORMAT,
        "version": ESTIMATOR_VERSION,
        "learning_rate": est.model.learning_rate,
        "base_prediction": est.model.base_prediction,
        "trees": [
            [
                {"feature": n.feature, "threshold": n.threshold, "left": n.left,
                 "right": n.right, "value": n.value}
                for n in tree
            ]
            for tree in est.model.trees
        ],
        "config": {"rounds": est.config.rounds, "max_depth": est.config.max_depth,
                   "learning_rate": est.config.learning_rate, "min_leaf": est.config.min_leaf},
        "feature_importance": est.feature_importance,
        "error_correlation_by_h": {str(k): v for k, v in sorted(est.error_correlation_by_h.items())},
        "validation_subject_ids": list(est.validation_subject_ids),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_estimator(est: AlphaEstimator, path: str | Path) -> None:
    Path(path).write_text(estimator_to_json(est), encoding="utf-8")


def load_estimator(path: str | Path) -> AlphaEstimator:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"unreadable estimator file {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != ESTIMATOR_FORMAT:
        raise FormatError(f"{path} is not a {ESTIMATOR_FORMAT} document")
    if doc.get("version") != ESTIMATOR_VERSION:
        raise FormatError(f"unsupported estimator version {doc.get('version')!r}, expected {ESTIMATOR_VERSION}")
    try:
        trees = [
            [TreeNode(int(n["feature"]), float(n["threshold"]), int(n["left"]),
                      int(n["right"]), float(n["value"])) for n in tree]
            for tree in doc["trees"]
        ]
        config = GbtConfig(**doc["config"])
        gains = np.array([doc["feature_importance"].get(name, 0.0) for name in FEATURE_NAMES])
        model = BoostedTrees(
            base_prediction=float(doc["base_prediction"]),
            learning_rate=float(doc["learning_rate"]),
            trees=trees,
            feature_gains=gains,
        )
        return AlphaEstimator(
            model=model,
            config=config,
            feature_importance={k: float(v) for k, v in doc["feature_importance"].items()},
            error_correlation_by_h={int(k): float(v) for k, v in doc["error_correlation_by_h"].items()},
            validation_subject_ids=[str(s) for s in doc["validation_subject_ids"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"corrupt estimator payload in {path}: {exc}") from None
