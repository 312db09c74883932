"""Squared-error gradient boosting on exact greedy regression trees.

Each round fits one depth-limited tree to the current residuals; splits
maximize the sum-of-squares reduction over all (feature, threshold)
candidates, where thresholds are midpoints between consecutive distinct
sorted values. Ties resolve to the lowest feature index, then the lowest
threshold, which makes fitting independent of row order (up to float
summation noise). Training MSE is checked to be non-increasing each round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, TrainingError

logger = logging.getLogger(__name__)

_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class TreeNode:
    feature: int  # -1 marks a leaf
    threshold: float
    left: int
    right: int
    value: float


@dataclass
class GbtConfig:
    rounds: int = 200
    max_depth: int = 3
    learning_rate: float = 0.05
    min_leaf: int = 5

    def __post_init__(self):
        if self.rounds < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ParameterError("rounds, max_depth, min_leaf must all be >= 1")
        if not 0 < self.learning_rate:
            raise ParameterError("learning_rate must be > 0")


@dataclass
class BoostedTrees:
    base_prediction: float
    learning_rate: float
    trees: list[list[TreeNode]] = field(default_factory=list)
    feature_gains: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_mse: list[float] = field(default_factory=list)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """(gain, feature, threshold) of the best valid split, or None."""
    n = y.size
    if n < 2 * min_leaf:
        return None
    total = y.sum()
    sse_parent = float(np.sum(y * y) - total * total / n)
    best = None
    counts = np.arange(1, n)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        csum_full = np.cumsum(ys)
        csq_full = np.cumsum(ys * ys)
        csum, csq = csum_full[:-1], csq_full[:-1]
        sse_left = csq - csum**2 / counts
        sse_right = (csq_full[-1] - csq) - (csum_full[-1] - csum) ** 2 / (n - counts)
        gains = sse_parent - sse_left - sse_right
        valid = (xs[:-1] != xs[1:]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not valid.any():
            continue
        gains = np.where(valid, gains, -np.inf)
        i = int(np.argmax(gains))  # first max: lowest threshold within the feature
        if gains[i] > _MIN_GAIN and (best is None or gains[i] > best[0]):
            best = (float(gains[i]), f, float(0.5 * (xs[i] + xs[i + 1])))
    return best


def _grow_tree(
    x: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int, gains_out: np.ndarray
) -> list[TreeNode]:
    nodes: list[TreeNode] = []

    def build(idx: np.ndarray, depth: int) -> int:
        slot = len(nodes)
        nodes.append(TreeNode(-1, 0.0, -1, -1, float(y[idx].mean())))
        if depth >= max_depth:
            return slot
        split = _best_split(x[idx], y[idx], min_leaf)
        if split is None:
            return slot
        gain, feature, threshold = split
        gains_out[feature] += gain
        go_left = x[idx, feature] <= threshold
        left = build(idx[go_left], depth + 1)
        right = build(idx[~go_left], depth + 1)
        nodes[slot] = TreeNode(feature, threshold, left, right, 0.0)
        return slot

    build(np.arange(y.size), 0)
    return nodes


def _eval_tree(nodes: list[TreeNode], x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    for r in range(x.shape[0]):
        i = 0
        while nodes[i].feature >= 0:
            node = nodes[i]
            i = node.left if x[r, node.feature] <= node.threshold else node.right
        out[r] = nodes[i].value
    return out


def fit_boosted_trees(x: np.ndarray, y: np.ndarray, config: GbtConfig | None = None) -> BoostedTrees:
    """Boost depth-limited trees against squared error.

    Degenerate inputs (every feature constant while targets vary) log a
    warning and return a base-prediction-only model.
    """
    if config is None:
        config = GbtConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ParameterError(f"{x.shape[0]} feature rows vs {y.shape[0]} targets")
    if y.size < 2 * config.min_leaf:
        raise ParameterError(f"need at least {2 * config.min_leaf} rows, got {y.size}")

    model = BoostedTrees(
        base_prediction=float(y.mean()),
        learning_rate=config.learning_rate,
        feature_gains=np.zeros(x.shape[1]),
    )
    if np.all(x == x[0]) and y.std() > 0:
        logger.warning("degenerate alpha dataset: all feature rows identical, returning base-only model")
        model.train_mse = [float(np.mean((y - model.base_prediction) ** 2))]
        return model

    pred = np.full(y.size, model.base_prediction)
    prev_mse = float(np.mean((y - pred) ** 2))
    model.train_mse.append(prev_mse)
    for round_no in range(config.rounds):
        residual = y - pred
        tree = _grow_tree(x, residual, config.max_depth, config.min_leaf, model.feature_gains)
        model.trees.append(tree)
        pred = pred + config.learning_rate * _eval_tree(tree, x)
        mse = float(np.mean((y - pred) ** 2))
        if mse > prev_mse + 1e-12:
            raise TrainingError(f"boosting MSE increased at round {round_no}: {prev_mse} -> {mse}")
        model.train_mse.append(mse)
        prev_mse = mse
    return model


def predict_boosted_trees(model: BoostedTrees, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.full(x.shape[0], model.base_prediction)
    for tree in model.trees:
        out += model.learning_rate * _eval_tree(tree, x)
    return out
