"""Shared model core: MLP feature map, RBF kernel, exact GP inference.

The feature map is a plain MLP (ReLU between hidden layers, linear output,
optional inverted dropout during training) with hand-written reverse-mode
gradients. GP hyperparameters live in log space so positivity is free. The
marginal log-likelihood gradient is the standard trace identity

    dMLL/dtheta = 1/2 tr((alpha alpha^T - K_n^{-1}) dK_n/dtheta),
    alpha = K_n^{-1} y,  K_n = K + sigma_n^2 I,

chained through the kernel into per-row latent gradients and then through
the MLP backward pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, ShapeError
from .numerics import chol_inverse, chol_solve, cholesky, tri_solve

logger = logging.getLogger(__name__)

# Counts posterior variances clamped from below -1e-6, which would indicate a
# bug rather than round-off.
_negative_variance_warnings = 0


@dataclass
class MlpParams:
    """Feature-map weights: layer_sizes[0] inputs down to a latent of layer_sizes[-1]."""

    layer_sizes: list[int]
    weights: list[np.ndarray]  # each (out_dim, in_dim), row-major
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    def __post_init__(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected:
                raise ShapeError(f"layer {i} weight shape {w.shape}, expected {expected}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ShapeError(f"layer {i} bias shape {b.shape}, expected ({self.layer_sizes[i + 1]},)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def latent_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout_rate,
        )


@dataclass
class GpHyper:
    """RBF lengthscale, signal variance, noise variance, all in log space."""

    log_lengthscale: float
    log_signal_var: float
    log_noise_var: float

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def signal_var(self) -> float:
        return math.exp(self.log_signal_var)

    @property
    def noise_var(self) -> float:
        return math.exp(self.log_noise_var)

    def as_array(self) -> np.ndarray:
        return np.array([self.log_lengthscale, self.log_signal_var, self.log_noise_var])

    @staticmethod
    def from_array(a: np.ndarray) -> "GpHyper":
        return GpHyper(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class PosteriorCurve:
    """Predictive mean and variance over a time grid, raw units."""

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if not (len(self.times) == len(self.mean) == len(self.variance)):
            raise ShapeError("times, mean, variance must have equal length")
        if len(self.variance) and self.variance.min() < 0:
            raise ShapeError("variance entries must be >= 0")


@dataclass
class ForwardCache:
    """Activation record from one mlp_forward call, replayed by mlp_backward."""

    params: MlpParams
    inputs: list[np.ndarray] = field(default_factory=list)      # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)     # pre-activation of each layer
    dropout_masks: list[np.ndarray | None] = field(default_factory=list)
    was_vector: bool = False


def init_mlp(
    layer_sizes: list[int], rng: np.random.Generator, dropout_rate: float = 0.0
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), weights, biases, dropout_rate)


def mlp_forward(
    params: MlpParams,
    inputs: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Map inputs (vector or row matrix) to latents.

    Train mode applies inverted dropout to hidden activations and needs an
    rng; eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(inputs, dtype=float)
    was_vector = x.ndim == 1
    if was_vector:
        x = x[None, :]
    if x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input dim {x.shape[1]} does not match first layer size {params.layer_sizes[0]}")
    dropping = mode == "train" and params.dropout_rate > 0.0
    if dropping and rng is None:
        raise ValueError("train mode with dropout requires an rng")

    cache = ForwardCache(params=params, was_vector=was_vector)
    a = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        pre = a @ w.T + b
        cache.preacts.append(pre)
        if i < n_layers - 1:
            a = np.maximum(pre, 0.0)
            if dropping:
                keep = 1.0 - params.dropout_rate
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
                cache.dropout_masks.append(mask)
            else:
                cache.dropout_masks.append(None)
        else:
            a = pre
            cache.dropout_masks.append(None)
    latent = a[0] if was_vector else a
    return latent, cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache, grad_latent: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of sum(grad_latent * latent) w.r.t. weights and biases."""
    if cache.params is not params:
        raise CacheError("cache was produced by a different parameter set")
    g = np.asarray(grad_latent, dtype=float)
    if cache.was_vector:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ShapeError(f"grad_latent shape {g.shape} does not match forward output {cache.preacts[-1].shape}")

    grad_w = [np.empty(0)] * len(params.weights)
    grad_b = [np.empty(0)] * len(params.biases)
    for i in reversed(range(len(params.weights))):
        if i < len(params.weights) - 1:
            mask = cache.dropout_masks[i]
            if mask is not None:
                g = g * mask
            g = g * (cache.preacts[i] > 0)
        grad_w[i] = g.T @ cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i]
    return grad_w, grad_b


def _sq_dists(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(z1**2, axis=1)[:, None]
        + np.sum(z2**2, axis=1)[None, :]
        - 2.0 * z1 @ z2.T
    )
    return np.maximum(d2, 0.0)


def rbf_kernel(z1: np.ndarray, z2: np.ndarray, hyper: GpHyper) -> np.ndarray:
    """K[i, j] = signal_var * exp(-||z1_i - z2_j||^2 / (2 lengthscale^2))."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    z2 = np.atleast_2d(np.asarray(z2, dtype=float))
    if z1.shape[1] != z2.shape[1]:
        raise ShapeError(f"latent dims differ: {z1.shape[1]} vs {z2.shape[1]}")
    return hyper.signal_var * np.exp(-_sq_dists(z1, z2) / (2.0 * hyper.lengthscale**2))


def _clamp_variance(var: np.ndarray) -> np.ndarray:
    global _negative_variance_warnings
    if var.size and var.min() < -1e-6:
        _negative_variance_warnings += 1
        logger.warning("posterior variance %g below round-off tolerance before clamping", var.min())
    return np.maximum(var, 0.0)


def gp_posterior(
    train_z: np.ndarray,
    train_y: np.ndarray,
    hyper: GpHyper,
    query_z: np.ndarray,
    jitter: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean exact GP posterior mean and variance at the query latents."""
    train_z = np.atleast_2d(train_z)
    query_z = np.atleast_2d(query_z)
    train_y = np.asarray(train_y, dtype=float)
    if train_z.shape[0] != train_y.shape[0]:
        raise ShapeError(f"{train_z.shape[0]} latents vs {train_y.shape[0]} targets")
    if query_z.shape[0] == 0:
        return np.empty(0), np.empty(0)

    k_nn = rbf_kernel(train_z, train_z, hyper) + hyper.noise_var * np.eye(train_z.shape[0])
    l = cholesky(k_nn, jitter)
    alpha = chol_solve(l, train_y)
    k_qn = rbf_kernel(query_z, train_z, hyper)
    mean = k_qn @ alpha
    v = tri_solve(l, k_qn.T)
    var = hyper.signal_var - np.sum(v**2, axis=0)
    return mean, _clamp_variance(var)


def gp_posterior_cached(
    l: np.ndarray,
    alpha: np.ndarray,
    train_z: np.ndarray,
    hyper: GpHyper,
    query_z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """gp_posterior given a precomputed Cholesky factor and alpha = K_n^{-1} y."""
    query_z = np.atleast_2d(query_z)
    if query_z.shape[0] == 0:
        return np.empty(0), np.empty(0)
    k_qn = rbf_kernel(query_z, train_z, hyper)
    mean = k_qn @ alpha
    v = tri_solve(l, k_qn.T)
    var = hyper.signal_var - np.sum(v**2, axis=0)
    return mean, _clamp_variance(var)


def gp_mll(train_z: np.ndarray, train_y: np.ndarray, hyper: GpHyper, jitter: float = 0.0) -> float:
    """Exact marginal log-likelihood via Cholesky."""
    train_z = np.atleast_2d(train_z)
    train_y = np.asarray(train_y, dtype=float)
    n = train_y.shape[0]
    k_nn = rbf_kernel(train_z, train_z, hyper) + hyper.noise_var * np.eye(n)
    l = cholesky(k_nn, jitter)
    alpha = chol_solve(l, train_y)
    return float(-0.5 * train_y @ alpha - np.sum(np.log(np.diag(l))) - 0.5 * n * math.log(2 * math.pi))


def mll_gradients(
    train_inputs: np.ndarray,
    train_y: np.ndarray,
    mlp: MlpParams,
    hyper: GpHyper,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
    jitter: float = 0.0,
) -> tuple[float, tuple[list[np.ndarray], list[np.ndarray]], np.ndarray]:
    """MLL value plus its gradients w.r.t. MLP weights/biases and log hypers.

    Returns (mll, (grad_weights, grad_biases), grad_hyper) where grad_hyper
    orders as (log_lengthscale, log_signal_var, log_noise_var). Gradients are
    ascent directions (of the MLL itself).
    """
    train_y = np.asarray(train_y, dtype=float)
    z, cache = mlp_forward(mlp, train_inputs, mode=mode, rng=rng)
    z = np.atleast_2d(z)
    n = z.shape[0]

    lengthscale2 = hyper.lengthscale**2
    d2 = _sq_dists(z, z)
    k_f = hyper.signal_var * np.exp(-d2 / (2.0 * lengthscale2))
    k_nn = k_f + hyper.noise_var * np.eye(n)
    l = cholesky(k_nn, jitter)
    alpha = chol_solve(l, train_y)
    mll = float(-0.5 * train_y @ alpha - np.sum(np.log(np.diag(l))) - 0.5 * n * math.log(2 * math.pi))

    a = np.outer(alpha, alpha) - chol_inverse(l)

    ak = a * k_f
    grad_hyper = np.array([
        0.5 * np.sum(ak * d2) / lengthscale2,          # d/d log lengthscale
        0.5 * np.sum(ak),                              # d/d log signal_var
        0.5 * np.trace(a) * hyper.noise_var,           # d/d log noise_var
    ])

    # dMLL/dz_p = (1/l^2) sum_j ak[p, j] (z_j - z_p)
    grad_z = (ak @ z - ak.sum(axis=1)[:, None] * z) / lengthscale2
    grad_w, grad_b = mlp_backward(mlp, cache, grad_z)
    return mll, (grad_w, grad_b), grad_hyper


def gp_mll_hyper_gradients(
    train_z: np.ndarray, train_y: np.ndarray, hyper: GpHyper, jitter: float = 0.0
) -> tuple[float, np.ndarray]:
    """MLL and its gradient w.r.t. the three log hypers, latents fixed."""
    z = np.atleast_2d(train_z)
    y = np.asarray(train_y, dtype=float)
    n = z.shape[0]
    lengthscale2 = hyper.lengthscale**2
    d2 = _sq_dists(z, z)
    k_f = hyper.signal_var * np.exp(-d2 / (2.0 * lengthscale2))
    l = cholesky(k_f + hyper.noise_var * np.eye(n), jitter)
    alpha = chol_solve(l, y)
    mll = float(-0.5 * y @ alpha - np.sum(np.log(np.diag(l))) - 0.5 * n * math.log(2 * math.pi))
    a = np.outer(alpha, alpha) - chol_inverse(l)
    ak = a * k_f
    grad = np.array([
        0.5 * np.sum(ak * d2) / lengthscale2,
        0.5 * np.sum(ak),
        0.5 * np.trace(a) * hyper.noise_var,
    ])
    return mll, grad


# ---------------------------------------------------------------------------
# Flat parameter packing for the optimizers and for gradient checks
# ---------------------------------------------------------------------------

def pack_params(mlp: MlpParams, hyper: GpHyper) -> np.ndarray:
    parts = [w.ravel() for w in mlp.weights] + [b for b in mlp.biases] + [hyper.as_array()]
    return np.concatenate(parts)


def unpack_params(theta: np.ndarray, template: MlpParams) -> tuple[MlpParams, GpHyper]:
    weights, biases = [], []
    pos = 0
    for w in template.weights:
        weights.append(theta[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
    for b in template.biases:
        biases.append(theta[pos : pos + b.size].copy())
        pos += b.size
    hyper = GpHyper.from_array(theta[pos : pos + 3])
    mlp = MlpParams(list(template.layer_sizes), weights, biases, template.dropout_rate)
    return mlp, hyper


def pack_gradients(grad_w: list[np.ndarray], grad_b: list[np.ndarray], grad_hyper: np.ndarray) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grad_w] + list(map(np.asarray, grad_b)) + [grad_hyper])


def weight_decay_mask(mlp: MlpParams) -> np.ndarray:
    """Flags MLP weight entries as decayable; biases and hypers are not."""
    parts = [np.ones(w.size) for w in mlp.weights] + [np.zeros(b.size) for b in mlp.biases] + [np.zeros(3)]
    return np.concatenate(parts)
