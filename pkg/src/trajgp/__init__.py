"""Personalized longitudinal biomarker forecasting.

A population deep-kernel GP learns trajectories from a cohort; a
subject-specific GP over the frozen feature map refits each subject's
observed visits; a learned shrinkage weight blends the two posteriors with
calibrated uncertainty.
"""

__version__ = "0.1.0"

from .dataset import (
    Cohort,
    ProgressionLabel,
    SubjectRecord,
    SynthConfig,
    Visit,
    generate_synthetic_cohort,
    load_cohort_csv,
    save_cohort_csv,
    split_cohort,
    truncate_history,
)
from .deep_kernel import GpHyper, MlpParams, PosteriorCurve
from .population import PopulationModel, TrainConfig, load_model, predict_population, save_model, train_population
from .shrinkage import (
    AlphaEstimator,
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
    save_estimator,
    train_shrinkage_estimator,
)
from .subject import SubjectModel, fit_subject, predict_subject
from .evaluation import EvalReport, alpha_correlation_analysis, evaluate_curve, run_benchmark
