"""Shared fixtures: one small trained pipeline reused across test modules."""

import pytest

from trajgp.dataset import SynthConfig, generate_synthetic_cohort, split_cohort
from trajgp.population import TrainConfig, train_population
from trajgp.shrinkage import train_shrinkage_estimator


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(SynthConfig(n_subjects=60, seed=11))


@pytest.fixture(scope="session")
def small_splits(small_cohort):
    return split_cohort(small_cohort, (0.6, 0.2, 0.2), seed=5)


@pytest.fixture(scope="session")
def small_pop(small_splits):
    train, _, _ = small_splits
    return train_population(train, TrainConfig(epochs=120, latent_dim=4, seed=2))


@pytest.fixture(scope="session")
def small_est(small_pop, small_splits):
    _, val, _ = small_splits
    est, rows = train_shrinkage_estimator(small_pop, val)
    return est, rows
