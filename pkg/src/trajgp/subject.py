"""Subject-specific GP over the frozen population feature map.

A subject fit reuses the population MLP and normalization statistics
untouched, maps the subject's observed visits into latent space once, and
then optimizes only the three log GP hyperparameters on those points,
starting from the population values. Because features and covariates are
constant within a subject, the latents trace a 1-D curve in warped time;
near-duplicate visit times therefore get a jitter floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SubjectRecord
from .deep_kernel import (
    GpHyper,
    PosteriorCurve,
    gp_mll_hyper_gradients,
    gp_posterior,
    mlp_forward,
)
from .errors import FactorizationError, FitError, OptimizerError, ShapeError
from .numerics import AdamState, adam_step
from .population import PopulationModel, TrainConfig, subject_rows

# Jitter floor engages when two observed visits are closer than this (months).
NEAR_DUPLICATE_GAP_MONTHS = 1e-3
NEAR_DUPLICATE_JITTER = 1e-5


def default_subject_config() -> TrainConfig:
    return TrainConfig(epochs=100, learning_rate=0.01, weight_decay=0.05)


@dataclass
class SubjectModel:
    population_ref: str
    hyper: GpHyper
    observed_latents: np.ndarray
    observed_targets: np.ndarray
    t_obs_months: float
    jitter: float = 0.0

    def __post_init__(self):
        if self.observed_latents.shape[0] < 1:
            raise ShapeError("subject model needs at least one observed point")
        if self.observed_latents.shape[0] != self.observed_targets.shape[0]:
            raise ShapeError("observed latents and targets must align")


def _fit_jitter(times: np.ndarray) -> float:
    gaps = np.diff(np.sort(times))
    if gaps.size and gaps.min() < NEAR_DUPLICATE_GAP_MONTHS:
        return NEAR_DUPLICATE_JITTER
    return 0.0


def fit_subject(
    pop: PopulationModel, observed: SubjectRecord, config: TrainConfig | None = None
) -> SubjectModel:
    """Fit the subject GP hyperparameters on the observed visits only."""
    if config is None:
        config = default_subject_config()
    times = observed.times
    rows = pop.standardize_rows(subject_rows(observed, times))
    latents, _ = mlp_forward(pop.mlp, rows, mode="eval")
    latents = np.atleast_2d(latents)
    targets = pop.standardize_y(observed.values)
    jitter = _fit_jitter(times)

    theta = pop.hyper.as_array().copy()
    adam = AdamState(config.learning_rate, 3, weight_decay=config.weight_decay)
    try:
        for epoch in range(config.epochs):
            mll, grad = gp_mll_hyper_gradients(latents, targets, GpHyper.from_array(theta), jitter)
            if not np.isfinite(mll):
                raise FitError(f"non-finite subject MLL at epoch {epoch}")
            theta = adam_step(adam, theta, -grad)
    except (FactorizationError, OptimizerError) as exc:
        raise FitError(f"subject {observed.subject_id}: {exc}") from exc

    return SubjectModel(
        population_ref=pop.model_id,
        hyper=GpHyper.from_array(theta),
        observed_latents=latents,
        observed_targets=targets,
        t_obs_months=float(times[-1]),
        jitter=jitter,
    )


def predict_subject(
    model: SubjectModel,
    pop: PopulationModel,
    subject: SubjectRecord,
    time_grid: np.ndarray,
) -> PosteriorCurve:
    """Subject-GP posterior over a time grid, de-standardized to raw units."""
    time_grid = np.asarray(time_grid, dtype=float)
    if time_grid.size == 0:
        return PosteriorCurve(time_grid, np.empty(0), np.empty(0))
    rows = pop.standardize_rows(subject_rows(subject, time_grid))
    latents, _ = mlp_forward(pop.mlp, rows, mode="eval")
    mean, var = gp_posterior(
        model.observed_latents,
        model.observed_targets,
        model.hyper,
        np.atleast_2d(latents),
        jitter=model.jitter,
    )
    return PosteriorCurve(time_grid, pop.destandardize_mean(mean), pop.destandardize_var(var))
