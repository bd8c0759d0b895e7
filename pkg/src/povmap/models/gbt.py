"""
Regularized gradient-boosted regression trees with a squared-error objective.

Each round fits one tree to the gradients g = prediction - target (hessians are
1). Splits maximize

    0.5 * [GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)] - gamma

over midpoints between distinct consecutive feature values; a row goes left
when its value is strictly below the threshold. Tree structure is searched on
the round's row subsample and leaf weights -G/(H+lambda) are then refit on all
training rows, which keeps the training loss non-increasing.
"""

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt

from povmap.clusters import TrainingRows
from povmap.errors import DataError
from povmap.validate import MetricUndefinedError, kfold_indices, r_squared

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.intp]

MODEL_FORMAT = "povmap-gbt"
MODEL_FORMAT_VERSION = 1
SEARCH_FOLDS = 3
LEAF = -1
# relative allowance for float noise when checking per-round loss
_RMSE_TOLERANCE = 1e-9


class GbtError(DataError):
    pass


@dataclass(frozen=True)
class GbtConfig:
    learning_rate: float = 0.03
    n_estimators: int = 200
    max_depth: int = 4
    min_child_weight: float = 2.0
    subsample: float = 0.8
    colsample_bytree: float = 0.8
    reg_lambda: float = 0.1
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if not 0.0 < self.learning_rate <= 1.0:
            errors.append(f"learning_rate {self.learning_rate} not in (0, 1]")
        if self.n_estimators < 0:
            errors.append(f"n_estimators {self.n_estimators} negative")
        if self.max_depth < 1:
            errors.append(f"max_depth {self.max_depth} < 1")
        if self.min_child_weight < 0:
            errors.append(f"min_child_weight {self.min_child_weight} negative")
        if not 0.0 < self.subsample <= 1.0:
            errors.append(f"subsample {self.subsample} not in (0, 1]")
        if not 0.0 < self.colsample_bytree <= 1.0:
            errors.append(f"colsample_bytree {self.colsample_bytree} not in (0, 1]")
        if self.reg_lambda < 0:
            errors.append(f"lambda {self.reg_lambda} negative")
        if self.gamma < 0:
            errors.append(f"gamma {self.gamma} negative")
        if errors:
            raise GbtError("Invalid GBT config: " + "; ".join(errors))

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["lambda"] = data.pop("reg_lambda")
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GbtConfig":
        values = dict(data)
        if "lambda" in values:
            values["reg_lambda"] = values.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise GbtError(f"Unknown GBT config keys: {', '.join(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class SearchSpace:
    """Closed bounds of the hyperparameter box."""

    learning_rate: tuple[float, float] = (0.005, 0.03)
    n_estimators: tuple[int, int] = (200, 300)
    max_depth: tuple[int, int] = (3, 10)
    min_child_weight: tuple[float, float] = (2.0, 20.0)
    subsample: tuple[float, float] = (0.2, 1.0)
    colsample_bytree: tuple[float, float] = (0.2, 1.0)
    reg_lambda: tuple[float, float] = (0.0, 0.1)

    def __post_init__(self) -> None:
        empty = [
            f.name for f in fields(self) if getattr(self, f.name)[0] > getattr(self, f.name)[1]
        ]
        if empty:
            raise GbtError(f"Empty search range for {', '.join(empty)}")

    def sample(self, rng: np.random.Generator, base: GbtConfig) -> GbtConfig:
        def uniform(bounds: tuple[float, float]) -> float:
            return float(rng.uniform(bounds[0], bounds[1]))

        def integer(bounds: tuple[int, int]) -> int:
            return int(rng.integers(bounds[0], bounds[1], endpoint=True))

        return GbtConfig(
            learning_rate=uniform(self.learning_rate),
            n_estimators=integer(self.n_estimators),
            max_depth=integer(self.max_depth),
            min_child_weight=uniform(self.min_child_weight),
            subsample=uniform(self.subsample),
            colsample_bytree=uniform(self.colsample_bytree),
            reg_lambda=uniform(self.reg_lambda),
            gamma=base.gamma,
            seed=base.seed,
        )


@dataclass(frozen=True, eq=False)
class Tree:
    """Binary tree as parallel node arrays; ``feature == -1`` marks a leaf."""

    feature: IntArray
    threshold: FloatArray
    left: IntArray
    right: IntArray
    value: FloatArray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("feature", "threshold", "left", "right", "value")
        )

    @property
    def depth(self) -> int:
        def walk(node: int) -> int:
            if self.feature[node] == LEAF:
                return 0
            return 1 + max(walk(int(self.left[node])), walk(int(self.right[node])))

        return walk(0)

    def leaf_index(self, x: FloatArray) -> IntArray:
        node = np.zeros(len(x), dtype=np.intp)
        while True:
            feat = self.feature[node]
            internal = np.flatnonzero(feat != LEAF)
            if internal.size == 0:
                return node
            current = node[internal]
            go_left = x[internal, feat[internal]] < self.threshold[current]
            node[internal] = np.where(go_left, self.left[current], self.right[current])

    def predict(self, x: FloatArray) -> FloatArray:
        result: FloatArray = self.value[self.leaf_index(x)]
        return result

    def to_dict(self) -> dict[str, list[Any]]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, list[Any]]) -> "Tree":
        return cls(
            feature=np.asarray(data["feature"], dtype=np.intp),
            threshold=np.asarray(data["threshold"], dtype=np.float64),
            left=np.asarray(data["left"], dtype=np.intp),
            right=np.asarray(data["right"], dtype=np.intp),
            value=np.asarray(data["value"], dtype=np.float64),
        )


@dataclass(frozen=True)
class GbtModel:
    base: float
    config: GbtConfig
    n_features: int
    trees: tuple[Tree, ...] = ()
    train_rmse: tuple[float, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "base": self.base,
            "config": self.config.to_dict(),
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
            "train_rmse": list(self.train_rmse),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GbtModel":
        if data.get("format") != MODEL_FORMAT:
            raise GbtError(f"Not a GBT model file (format {data.get('format')!r})")
        if data.get("version") != MODEL_FORMAT_VERSION:
            raise GbtError(f"Unsupported GBT model version {data.get('version')}")
        return cls(
            base=float(data["base"]),
            config=GbtConfig.from_dict(data["config"]),
            n_features=int(data["n_features"]),
            trees=tuple(Tree.from_dict(t) for t in data["trees"]),
            train_rmse=tuple(float(v) for v in data.get("train_rmse", [])),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "GbtModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def split_gains(
    sorted_x: FloatArray,
    sorted_g: FloatArray,
    sorted_h: FloatArray,
    reg_lambda: float,
    gamma: float,
    min_child_weight: float,
) -> FloatArray:
    """
    Gain of splitting after each position, per column.

    Inputs are (m, f) arrays sorted by feature value within each column. Entry
    (i, j) is the gain of sending sorted rows 0..i of column j left; invalid
    positions (equal neighbours, light children, gain <= 0) hold -inf.
    """
    cum_g = np.cumsum(sorted_g, axis=0)
    cum_h = np.cumsum(sorted_h, axis=0)
    g_total = cum_g[-1]
    h_total = cum_h[-1]
    gl, hl = cum_g[:-1], cum_h[:-1]
    gr, hr = g_total - gl, h_total - hl
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (
            gl * gl / (hl + reg_lambda)
            + gr * gr / (hr + reg_lambda)
            - g_total * g_total / (h_total + reg_lambda)
        ) - gamma
    valid = (
        (sorted_x[1:] > sorted_x[:-1])
        & (hl >= min_child_weight)
        & (hr >= min_child_weight)
        & np.isfinite(gain)
        & (gain > 0)
    )
    result: FloatArray = np.where(valid, gain, -np.inf)
    return result


def _midpoint(a: float, b: float) -> float:
    mid = a + (b - a) / 2.0
    # adjacent floats can round the midpoint down onto a
    return mid if a < mid <= b else b


def best_split(
    values: Sequence[float] | FloatArray,
    g: Sequence[float] | FloatArray,
    h: Sequence[float] | FloatArray,
    config: GbtConfig,
) -> Optional[tuple[float, float]]:
    """
    Best (threshold, gain) for one feature, or None when no split qualifies.

    Ties resolve to the smallest threshold.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        return None
    order = np.argsort(x, kind="stable")
    xs = x[order][:, None]
    gains = split_gains(
        xs,
        np.asarray(g, dtype=np.float64)[order][:, None],
        np.asarray(h, dtype=np.float64)[order][:, None],
        config.reg_lambda,
        config.gamma,
        config.min_child_weight,
    )[:, 0]
    if not np.isfinite(gains).any():
        return None
    i = int(np.argmax(gains))
    return _midpoint(float(xs[i, 0]), float(xs[i + 1, 0])), float(gains[i])


def _node_split(
    x: FloatArray, g: FloatArray, h: FloatArray, rows: IntArray, features: IntArray,
    config: GbtConfig,
) -> Optional[tuple[int, float]]:
    block = x[np.ix_(rows, features)]
    order = np.argsort(block, axis=0, kind="stable")
    xs = np.take_along_axis(block, order, axis=0)
    gains = split_gains(
        xs, g[rows][order], h[rows][order],
        config.reg_lambda, config.gamma, config.min_child_weight,
    )
    per_feature = gains.max(axis=0)
    if not np.isfinite(per_feature).any():
        return None
    j = int(np.argmax(per_feature))
    i = int(np.argmax(gains[:, j]))
    return int(features[j]), _midpoint(float(xs[i, j]), float(xs[i + 1, j]))


def _grow(
    x: FloatArray, g: FloatArray, h: FloatArray, rows: IntArray, features: IntArray,
    config: GbtConfig,
) -> Tree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []

    def new_node() -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        return len(feature) - 1

    # depth-first, left child first, so node numbering is deterministic
    stack = [(new_node(), rows, 0)]
    while stack:
        node, members, depth = stack.pop()
        if depth >= config.max_depth or members.size < 2:
            continue
        split = _node_split(x, g, h, members, features, config)
        if split is None:
            continue
        f, t = split
        goes_left = x[members, f] < t
        lo, hi = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, lo, hi
        stack.append((hi, members[~goes_left], depth + 1))
        stack.append((lo, members[goes_left], depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.intp),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.intp),
        right=np.asarray(right, dtype=np.intp),
        value=np.zeros(len(feature), dtype=np.float64),
    )


def _refit_leaves(tree: Tree, x: FloatArray, g: FloatArray, reg_lambda: float) -> Tree:
    leaves = tree.leaf_index(x)
    size = len(tree.feature)
    g_sum = np.bincount(leaves, weights=g, minlength=size)
    h_sum = np.bincount(leaves, minlength=size).astype(np.float64)
    value = np.zeros(size, dtype=np.float64)
    occupied = h_sum > 0
    value[occupied] = -g_sum[occupied] / (h_sum[occupied] + reg_lambda)
    return Tree(tree.feature, tree.threshold, tree.left, tree.right, value)


def _rmse(residual: FloatArray) -> float:
    return math.sqrt(math.fsum((residual * residual).tolist()) / residual.size)


def _check_inputs(x: FloatArray, y: FloatArray) -> None:
    if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
        raise GbtError(f"Feature matrix {x.shape} does not match targets {y.shape}")
    if len(y) < 2:
        raise GbtError("Training needs at least 2 rows")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise GbtError("Training data contains non-finite values")


def train(
    x: FloatArray | TrainingRows, y: Optional[FloatArray] = None, config: GbtConfig = GbtConfig()
) -> GbtModel:
    """
    Fit a boosted ensemble.

    Accepts either a feature matrix and targets or a ``TrainingRows`` bundle.
    """
    if isinstance(x, TrainingRows):
        x, y = x.x, x.y
    if y is None:
        raise GbtError("Targets are required")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_inputs(x, y)

    n, p = x.shape
    base = math.fsum(y.tolist()) / n
    prediction = np.full(n, base)
    rmse = [_rmse(prediction - y)]
    varying = np.flatnonzero((x.max(axis=0) > x.min(axis=0)))
    if varying.size == 0:
        logger.warning("All feature columns are constant; model is the base prediction")
        return GbtModel(base=base, config=config, n_features=p, train_rmse=tuple(rmse))

    rng = np.random.default_rng(config.seed)
    ones = np.ones(n)
    trees = []
    for round_index in range(config.n_estimators):
        g = prediction - y
        n_rows = min(n, max(2, int(round(config.subsample * n))))
        n_cols = min(p, max(1, int(round(config.colsample_bytree * p))))
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(p, size=n_cols, replace=False)) if n_cols < p else np.arange(p)

        structure = _grow(x, g, ones, rows.astype(np.intp), cols.astype(np.intp), config)
        tree = _refit_leaves(structure, x, g, config.reg_lambda)
        prediction = prediction + config.learning_rate * tree.predict(x)
        trees.append(tree)

        rmse.append(_rmse(prediction - y))
        if rmse[-1] > rmse[-2] * (1.0 + _RMSE_TOLERANCE) + _RMSE_TOLERANCE:
            raise GbtError(
                f"Training RMSE increased at round {round_index}: {rmse[-2]} -> {rmse[-1]}"
            )

    logger.debug(f"Trained {len(trees)} trees on {n} rows; final RMSE {rmse[-1]:.4f}")
    return GbtModel(
        base=base, config=config, n_features=p, trees=tuple(trees), train_rmse=tuple(rmse)
    )


def predict(model: GbtModel, x: Sequence[float] | FloatArray) -> FloatArray:
    """Raw ensemble output for each row of ``x`` (a single row is accepted)."""
    data = np.asarray(x, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[1] != model.n_features:
        raise GbtError(
            f"Expected {model.n_features} features per row, got shape {np.shape(x)}"
        )
    total = np.zeros(len(data), dtype=np.float64)
    for tree in model.trees:
        total = total + tree.predict(data)
    result: FloatArray = model.base + model.config.learning_rate * total
    return result


@dataclass(frozen=True)
class SearchTrial:
    config: GbtConfig
    score: float


@dataclass(frozen=True)
class SearchResult:
    best: GbtConfig
    trials: tuple[SearchTrial, ...]
    row_ids: tuple[str, ...] = field(default=())


def _cv_score(rows: TrainingRows, config: GbtConfig, seed: int) -> float:
    k = min(SEARCH_FOLDS, len(rows))
    oof = np.zeros(len(rows))
    for fold in kfold_indices(len(rows), k, seed):
        train_idx = np.setdiff1d(np.arange(len(rows)), fold)
        model = train(rows.x[train_idx], rows.y[train_idx], config)
        oof[fold] = predict(model, rows.x[fold])
    try:
        return r_squared(rows.y, oof)
    except MetricUndefinedError:
        return -math.inf


def hyper_search(
    rows: TrainingRows,
    space: SearchSpace,
    budget: int,
    seed: int,
    base: GbtConfig = GbtConfig(),
) -> SearchResult:
    """
    Seeded random search scored by internal k-fold R² on ``rows`` only.

    Returns the first config reaching the best score together with the full
    evaluation log and the ids of every row the search read.
    """
    if budget < 1:
        raise GbtError(f"Search budget must be >= 1, got {budget}")
    # every inner fold must leave at least 2 rows to train on
    if len(rows) < 3:
        raise GbtError(f"Search needs at least 3 training rows, got {len(rows)}")
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(budget):
        config = space.sample(rng, base)
        score = _cv_score(rows, config, seed)
        trials.append(SearchTrial(config=config, score=score))
        logger.debug(f"Search trial {i}: score {score:.4f}")
    best = max(range(len(trials)), key=lambda i: (trials[i].score, -i))
    logger.info(f"Hyperparameter search: best score {trials[best].score:.4f} of {budget}")
    return SearchResult(best=trials[best].config, trials=tuple(trials), row_ids=rows.cluster_ids)
