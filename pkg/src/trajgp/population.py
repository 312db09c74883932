"""Population deep-kernel GP: training, prediction, serialization.

Training flattens every (subject, visit) pair into one row (features,
covariates, time), standardizes inputs and targets by training statistics,
and runs full-batch marginal-likelihood ascent with Adam, jointly over the
MLP weights and the three log GP hyperparameters. The exact-GP objective is
not decomposable, so one "epoch" is one full gradient step.

A trained model keeps the standardized training latents/targets and caches
their Cholesky factor eagerly, so posterior queries are cheap and the model
is safe to share read-only across workers.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import Cohort, SubjectRecord
from .deep_kernel import (
    GpHyper,
    MlpParams,
    PosteriorCurve,
    gp_posterior_cached,
    init_mlp,
    mll_gradients,
    mlp_forward,
    pack_gradients,
    pack_params,
    rbf_kernel,
    unpack_params,
    weight_decay_mask,
)
from .errors import (
    FactorizationError,
    FormatError,
    OptimizerError,
    ParameterError,
    ParseError,
    ShapeError,
    TrainingError,
)
from .numerics import AdamState, adam_step, chol_solve, cholesky, make_rng, single_thread_blas

MODEL_FORMAT = "trajgp-population-model"
MODEL_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.01
    weight_decay: float = 0.01
    dropout: float = 0.2
    latent_dim: int = 8
    hidden_sizes: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")


@dataclass
class NormStats:
    """Per-column input statistics and scalar target statistics."""

    input_mean: np.ndarray
    input_sd: np.ndarray
    y_mean: float
    y_sd: float


@dataclass
class PopulationModel:
    mlp: MlpParams
    hyper: GpHyper
    train_latents: np.ndarray
    train_targets: np.ndarray
    norm_stats: NormStats
    train_config: TrainConfig
    feature_dim: int
    covariate_dim: int
    train_subject_ids: list[str] = field(default_factory=list)
    mll_trace: list[float] = field(default_factory=list)
    _chol: np.ndarray = field(init=False, repr=False)
    _alpha: np.ndarray = field(init=False, repr=False)
    _model_id: str = field(init=False, repr=False, default="")

    def __post_init__(self):
        if self.train_latents.shape[0] != self.train_targets.shape[0]:
            raise ShapeError("train_latents rows must match train_targets length")
        if self.norm_stats.input_sd.min() <= 0 or self.norm_stats.y_sd <= 0:
            raise ShapeError("normalization sds must be positive")
        k_nn = _train_gram(self.train_latents, self.hyper)
        self._chol = cholesky(k_nn)
        self._alpha = chol_solve(self._chol, self.train_targets)
        self._model_id = hashlib.sha256(model_to_json(self).encode()).hexdigest()[:16]

    @property
    def model_id(self) -> str:
        return self._model_id

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.covariate_dim + 1

    def standardize_rows(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.norm_stats.input_mean) / self.norm_stats.input_sd

    def standardize_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.norm_stats.y_mean) / self.norm_stats.y_sd

    def destandardize_mean(self, mean: np.ndarray) -> np.ndarray:
        return mean * self.norm_stats.y_sd + self.norm_stats.y_mean

    def destandardize_var(self, var: np.ndarray) -> np.ndarray:
        return var * self.norm_stats.y_sd**2


def _train_gram(latents: np.ndarray, hyper: GpHyper) -> np.ndarray:
    return rbf_kernel(latents, latents, hyper) + hyper.noise_var * np.eye(latents.shape[0])


def subject_rows(subject: SubjectRecord, times: np.ndarray) -> np.ndarray:
    """Stack (features, covariates, t) query rows for the given times."""
    times = np.asarray(times, dtype=float)
    base = np.concatenate([subject.baseline_features, subject.covariates])
    rows = np.tile(base, (times.size, 1))
    return np.column_stack([rows, times])


def flatten_cohort(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """All (subject, visit) pairs as rows U = (X, M, t) and targets y."""
    rows, targets = [], []
    for s in cohort.subjects:
        base = np.concatenate([s.baseline_features, s.covariates])
        for v in s.visits:
            rows.append(np.concatenate([base, [v.time_months]]))
            targets.append(v.value)
    return np.array(rows), np.array(targets)


def default_layer_sizes(input_dim: int, config: TrainConfig) -> list[int]:
    if config.hidden_sizes is not None:
        return [input_dim, *config.hidden_sizes, config.latent_dim]
    # One hidden layer at the geometric mean of the end dims.
    hidden = max(config.latent_dim, round(math.sqrt(input_dim * config.latent_dim)))
    return [input_dim, hidden, config.latent_dim]


def initial_hyper(latent_dim: int) -> GpHyper:
    return GpHyper(
        log_lengthscale=math.log(math.sqrt(latent_dim)),
        log_signal_var=0.0,
        log_noise_var=math.log(0.01),
    )


def train_population(cohort: Cohort, config: TrainConfig) -> PopulationModel:
    """Fit the population model by full-batch MLL ascent."""
    raw_rows, raw_y = flatten_cohort(cohort)
    if len(cohort) < 2 or raw_rows.shape[0] < 2:
        raise TrainingError("population training needs >= 2 subjects and >= 2 visits in total")

    input_mean = raw_rows.mean(axis=0)
    input_sd = raw_rows.std(axis=0)
    input_sd[input_sd < 1e-12] = 1.0
    y_mean = float(raw_y.mean())
    y_sd = float(raw_y.std())
    if y_sd < 1e-12:
        y_sd = 1.0
    norm = NormStats(input_mean, input_sd, y_mean, y_sd)
    x = (raw_rows - input_mean) / input_sd
    y = (raw_y - y_mean) / y_sd

    rng = make_rng(config.seed)
    mlp = init_mlp(default_layer_sizes(x.shape[1], config), rng, dropout_rate=config.dropout)
    hyper = initial_hyper(config.latent_dim)
    theta = pack_params(mlp, hyper)
    decay_mask = weight_decay_mask(mlp)
    adam = AdamState(config.learning_rate, theta.size, weight_decay=config.weight_decay)

    with single_thread_blas():
        initial_mll, _, _ = mll_gradients(x, y, mlp, hyper, mode="eval")
        trace = []
        for epoch in range(config.epochs):
            mlp, hyper = unpack_params(theta, mlp)
            try:
                mll, (gw, gb), gh = mll_gradients(x, y, mlp, hyper, rng=rng, mode="train")
                if not math.isfinite(mll):
                    raise TrainingError(f"non-finite MLL at epoch {epoch}")
                grad = pack_gradients(gw, gb, gh)
                theta = adam_step(adam, theta, -grad, decayable=decay_mask)
            except (FactorizationError, OptimizerError) as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            trace.append(mll)

        mlp, hyper = unpack_params(theta, mlp)
        final_mll, _, _ = mll_gradients(x, y, mlp, hyper, mode="eval")
        if not final_mll > initial_mll:
            raise TrainingError(
                f"MLL did not improve: initial {initial_mll:.6f}, final {final_mll:.6f}"
            )

        latents, _ = mlp_forward(mlp, x, mode="eval")
    return PopulationModel(
        mlp=mlp,
        hyper=hyper,
        train_latents=np.atleast_2d(latents),
        train_targets=y,
        norm_stats=norm,
        train_config=config,
        feature_dim=cohort.feature_dim,
        covariate_dim=cohort.covariate_dim,
        train_subject_ids=cohort.subject_ids(),
        mll_trace=trace,
    )


def predict_population(
    model: PopulationModel, subject: SubjectRecord, time_grid: np.ndarray
) -> PosteriorCurve:
    """Posterior trajectory for one subject over a time grid, raw units."""
    time_grid = np.asarray(time_grid, dtype=float)
    if subject.baseline_features.size != model.feature_dim or subject.covariates.size != model.covariate_dim:
        raise ShapeError(
            f"subject dims ({subject.baseline_features.size}, {subject.covariates.size}) "
            f"do not match model ({model.feature_dim}, {model.covariate_dim})"
        )
    if time_grid.size == 0:
        return PosteriorCurve(time_grid, np.empty(0), np.empty(0))
    if time_grid.min() < 0:
        raise ParameterError("time grid must be non-negative")

    rows = model.standardize_rows(subject_rows(subject, time_grid))
    latents, _ = mlp_forward(model.mlp, rows, mode="eval")
    mean, var = gp_posterior_cached(
        model._chol, model._alpha, model.train_latents, model.hyper, np.atleast_2d(latents)
    )
    return PosteriorCurve(time_grid, model.destandardize_mean(mean), model.destandardize_var(var))


# ---------------------------------------------------------------------------
# Serialization: one versioned JSON document
# ---------------------------------------------------------------------------

def _encode_f64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_f64(payload: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").astype(float)
    return arr.reshape(shape)


def model_to_json(model: PopulationModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": list(model.mlp.layer_sizes),
        "dropout_rate": model.mlp.dropout_rate,
        "weights": [w.ravel().tolist() for w in model.mlp.weights],
        "biases": [b.tolist() for b in model.mlp.biases],
        "log_lengthscale": model.hyper.log_lengthscale,
        "log_signal_var": model.hyper.log_signal_var,
        "log_noise_var": model.hyper.log_noise_var,
        "norm_stats": {
            "input_mean": model.norm_stats.input_mean.tolist(),
            "input_sd": model.norm_stats.input_sd.tolist(),
            "y_mean": model.norm_stats.y_mean,
            "y_sd": model.norm_stats.y_sd,
        },
        "train_latents": {
            "shape": list(model.train_latents.shape),
            "data": _encode_f64(model.train_latents),
        },
        "train_targets": {
            "shape": [int(model.train_targets.shape[0])],
            "data": _encode_f64(model.train_targets),
        },
        "train_config": {**asdict(model.train_config),
                         "hidden_sizes": list(model.train_config.hidden_sizes)
                         if model.train_config.hidden_sizes is not None else None},
        "feature_dim": model.feature_dim,
        "covariate_dim": model.covariate_dim,
        "train_subject_ids": list(model.train_subject_ids),
        "mll_trace": list(model.mll_trace),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_model(model: PopulationModel, path: str | Path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path: str | Path) -> PopulationModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"unreadable model file {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path} is not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {doc.get('version')!r}, expected {MODEL_VERSION}")
    try:
        layer_sizes = [int(v) for v in doc["layer_sizes"]]
        weights = [
            np.array(flat, dtype=float).reshape(out_dim, in_dim)
            for flat, out_dim, in_dim in zip(doc["weights"], layer_sizes[1:], layer_sizes[:-1])
        ]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        mlp = MlpParams(layer_sizes, weights, biases, float(doc["dropout_rate"]))
        hyper = GpHyper(
            float(doc["log_lengthscale"]), float(doc["log_signal_var"]), float(doc["log_noise_var"])
        )
        ns = doc["norm_stats"]
        norm = NormStats(
            np.array(ns["input_mean"], dtype=float),
            np.array(ns["input_sd"], dtype=float),
            float(ns["y_mean"]),
            float(ns["y_sd"]),
        )
        latents = _decode_f64(doc["train_latents"]["data"], tuple(doc["train_latents"]["shape"]))
        targets = _decode_f64(doc["train_targets"]["data"], tuple(doc["train_targets"]["shape"]))
        tc = dict(doc["train_config"])
        if tc.get("hidden_sizes") is not None:
            tc["hidden_sizes"] = tuple(tc["hidden_sizes"])
        config = TrainConfig(**tc)
        return PopulationModel(
            mlp=mlp,
            hyper=hyper,
            train_latents=latents,
            train_targets=targets,
            norm_stats=norm,
            train_config=config,
            feature_dim=int(doc["feature_dim"]),
            covariate_dim=int(doc["covariate_dim"]),
            train_subject_ids=[str(s) for s in doc["train_subject_ids"]],
            mll_trace=[float(v) for v in doc["mll_trace"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"corrupt model payload in {path}: {exc}") from None
