"""Dense linear algebra and optimization primitives.

Cholesky factorization with jitter escalation, triangular solves, Adam with
decoupled weight decay, central finite differences, and the seeded random
source used everywhere. The random source is fixed to numpy's Philox
counter-based generator: synthetic cohorts must reproduce byte-identically,
so the generator choice is part of the file-format contract.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotri

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

from .errors import FactorizationError, OptimizerError, ShapeError

# Base relative jitter used when escalation starts from zero.
DEFAULT_JITTER_SCALE = 1e-6
JITTER_ESCALATIONS = 3


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator; the single RNG algorithm used by the package."""
    return np.random.Generator(np.random.Philox(seed))


def single_thread_blas():
    """Context capping BLAS at one thread.

    The kernel matrices here top out around 1200x1200, where multithreaded
    BLAS gains nothing but can lose an order of magnitude to thread-pool
    thrash on small repeated factorizations. Wrap training loops and
    per-subject sweeps in this.
    """
    if threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=1, user_api="blas")


def cholesky(a: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L @ L.T = a + jitter * I.

    If factorization fails, jitter escalates (x10, at most three times,
    starting from 1e-6 times the mean diagonal when the input jitter is 0)
    before giving up with a FactorizationError naming the final jitter.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > 1e-10 * scale:
        raise ShapeError("cholesky input is not symmetric within 1e-10 relative")

    n = a.shape[0]
    base = DEFAULT_JITTER_SCALE * max(np.mean(np.diag(a)), np.finfo(float).tiny)
    current = float(jitter)
    for attempt in range(JITTER_ESCALATIONS + 1):
        try:
            return np.linalg.cholesky(a + current * np.eye(n))
        except np.linalg.LinAlgError:
            current = base if current == 0.0 else current * 10.0
    raise FactorizationError(
        f"matrix not positive definite after jitter escalation to {current / 10.0:g}"
    )


def chol_solve(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L @ L.T) x = b given the lower factor L."""
    if l.shape[0] != np.asarray(b).shape[0]:
        raise ShapeError(f"factor of size {l.shape[0]} cannot solve rhs of shape {np.shape(b)}")
    return cho_solve((l, True), b)


def tri_solve(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L x = b for lower-triangular L."""
    if l.shape[0] != np.asarray(b).shape[0]:
        raise ShapeError(f"factor of size {l.shape[0]} cannot solve rhs of shape {np.shape(b)}")
    return solve_triangular(l, b, lower=True)


def chol_inverse(l: np.ndarray) -> np.ndarray:
    """(L L^T)^{-1} from the lower factor; a third the flops of a full solve."""
    inv, info = dpotri(l, lower=1)
    if info != 0:
        raise FactorizationError(f"triangular inversion failed with info={info}")
    return inv + np.tril(inv, -1).T


@dataclass
class AdamState:
    """Adam moments plus hyperparameters for one flat parameter vector."""

    learning_rate: float
    n_params: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: np.ndarray = field(init=False)
    second_moment: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.first_moment = np.zeros(self.n_params)
        self.second_moment = np.zeros(self.n_params)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    decayable: np.ndarray | None = None,
) -> np.ndarray:
    """One minimizing Adam update with bias correction and decoupled decay.

    Weight decay subtracts lr * wd * param before the Adam delta, only for
    entries flagged in `decayable` (all entries when it is None and the
    state's weight_decay is nonzero). Mutates `state`, returns new params.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.size != state.n_params:
        raise ShapeError(f"params {params.shape} and grads {grads.shape} must both have {state.n_params} entries")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise OptimizerError(f"non-finite gradient at parameter index {int(np.argmax(bad))}")

    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grads**2
    m_hat = state.first_moment / (1 - state.beta1**state.step)
    v_hat = state.second_moment / (1 - state.beta2**state.step)

    out = params.copy()
    if state.weight_decay != 0.0:
        mask = np.ones_like(params) if decayable is None else np.asarray(decayable, dtype=float)
        out -= state.learning_rate * state.weight_decay * mask * params
    out -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return out


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (f(x + step) - f(x - step)) / (2 * eps)
    return grad
