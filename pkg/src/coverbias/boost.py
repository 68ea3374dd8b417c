"""Gradient-boosted regression trees for the bias-explanation stage.

A deliberately transparent boosting engine: squared-error objective,
exact greedy split enumeration over sorted unique feature values (no
histogram approximation; area-level tables are small), L1/L2 leaf
regularization, per-split gain penalty, and per-round row subsampling.
Second-order statistics are kept explicit (per-row gradient/hessian)
even though the squared-error hessian is constant, so the split gain and
leaf-weight formulas read exactly as implemented:

    gain  = 1/2 * [ GL^2/(HL+l2) + GR^2/(HR+l2) - G^2/(H+l2) ] - gamma
    leaf  = -soft_threshold(G, l1) / (H + l2)

Predictions are ``base + learning_rate * sum of per-tree leaf outputs``,
with the sum taken in tree order so refitting bookkeeping and later
scoring agree bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SchemaError

DEFAULT_GRID_LEARNING_RATES = (0.05, 0.1, 0.3)
DEFAULT_GRID_DEPTHS = (2, 3, 4)
DEFAULT_GRID_SUBSAMPLES = (0.8, 1.0)
DEFAULT_GRID_L2 = (1.0, 10.0)
DEFAULT_GRID_L1 = (0.0, 1.0)


@dataclass(frozen=True)
class BoostParams:
    learning_rate: float = 0.1
    max_depth: int = 3
    n_rounds: int = 150
    subsample: float = 1.0
    lambda_l2: float = 1.0
    alpha_l1: float = 0.0
    gamma_min_gain: float = 0.0
    min_child_hessian: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.learning_rate <= 1.0):
            raise DomainError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.max_depth < 1:
            raise DomainError("max_depth must be >= 1")
        if self.n_rounds < 1:
            raise DomainError("n_rounds must be >= 1")
        if not (0.0 < self.subsample <= 1.0):
            raise DomainError(f"subsample must be in (0, 1], got {self.subsample}")
        if self.lambda_l2 < 0 or self.alpha_l1 < 0 or self.gamma_min_gain < 0:
            raise DomainError("regularization penalties must be >= 0")
        if self.min_child_hessian < 0:
            raise DomainError("min_child_hessian must be >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "n_rounds": self.n_rounds,
            "subsample": self.subsample,
            "lambda_l2": self.lambda_l2,
            "alpha_l1": self.alpha_l1,
            "gamma_min_gain": self.gamma_min_gain,
            "min_child_hessian": self.min_child_hessian,
            "seed": self.seed,
        }


def default_grid(n_rounds: int = 150, seed: int = 0) -> list[BoostParams]:
    """The documented default search grid; override via config."""
    grid = []
    for lr in DEFAULT_GRID_LEARNING_RATES:
        for depth in DEFAULT_GRID_DEPTHS:
            for sub in DEFAULT_GRID_SUBSAMPLES:
                for l2 in DEFAULT_GRID_L2:
                    for l1 in DEFAULT_GRID_L1:
                        grid.append(
                            BoostParams(
                                learning_rate=lr,
                                max_depth=depth,
                                n_rounds=n_rounds,
                                subsample=sub,
                                lambda_l2=l2,
                                alpha_l1=l1,
                                seed=seed,
                            )
                        )
    return grid


@dataclass
class TreeNode:
    """One node of a regression tree; a leaf iff ``feature`` is None.

    ``cover`` is the hessian mass (row count for squared error) of the
    training rows routed through the node while the tree was grown; the
    attribution stage uses the child/parent ratios as conditional
    probabilities.
    """

    cover: float
    feature: int | None = None
    threshold: float | None = None
    default_left: bool = True  # reserved; inputs are missing-free
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    weight: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"weight": self.weight, "cover": self.cover}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "default_left": self.default_left,
            "cover": self.cover,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "weight" in d:
            return cls(cover=float(d["cover"]), weight=float(d["weight"]))
        return cls(
            cover=float(d["cover"]),
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            default_left=bool(d.get("default_left", True)),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


@dataclass
class TreeEnsemble:
    """A fitted boosted ensemble plus the metadata needed downstream."""

    trees: list[TreeNode]
    base_prediction: float
    params: BoostParams
    feature_names: list[str]
    train_rmse: list[float] = field(default_factory=list)  # per-round, training metadata

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


@dataclass(frozen=True)
class Dataset:
    """Joined modeling table: one row per area, features + target."""

    area_ids: list[str]
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        if self.X.ndim != 2 or len(self.y) != self.X.shape[0]:
            raise SchemaError("X must be (n, F) with y of length n")
        if self.X.shape[1] != len(self.feature_names):
            raise SchemaError("feature_names length must match X columns")

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            area_ids=[self.area_ids[i] for i in idx],
            X=self.X[idx],
            y=self.y[idx],
            feature_names=self.feature_names,
        )


def make_dataset(bias_table, covariates, area_ids: list[str] | None = None) -> Dataset:
    """Join a BiasTable with a CovariateTable on area id."""
    if area_ids is None:
        area_ids = [a for a in bias_table.rows if a in covariates.rows]
    X = covariates.matrix(area_ids)
    y = np.array([bias_table.rows[a].bias for a in area_ids])
    return Dataset(area_ids=area_ids, X=X, y=y, feature_names=covariates.qualified_names)


def split_train_test(table: Dataset, fraction: float = 0.8, seed: int = 0):
    """Seeded uniform shuffle; first ceil(fraction*n) rows train.

    The two parts are disjoint and exhaustive. Requires n >= 10 so the
    test side is never empty at the default fraction.
    """
    n = len(table)
    if n < 10:
        raise DomainError(f"need at least 10 rows to split, got {n}")
    if not (0.0 < fraction < 1.0):
        raise DomainError("fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(fraction * n)
    return table.take(perm[:n_train]), table.take(perm[n_train:])


def _soft_threshold(g: float, alpha: float) -> float:
    return math.copysign(max(abs(g) - alpha, 0.0), g) if alpha > 0 else g


def _leaf_weight(G: float, H: float, params: BoostParams) -> float:
    return -_soft_threshold(G, params.alpha_l1) / (H + params.lambda_l2)


def _best_split(X, g, h, idx, params: BoostParams):
    """Exact greedy search over all features and midpoints.

    Returns (gain, feature, threshold, left_idx, right_idx) or None.
    Ties in gain resolve to the lowest feature index, then the lowest
    threshold, by iterating in that order with strict improvement.
    """
    G = float(g[idx].sum())
    H = float(h[idx].sum())
    lam = params.lambda_l2
    parent_score = G * G / (H + lam)
    best = None
    best_gain = 0.0
    for f in range(X.shape[1]):
        xf = X[idx, f]
        order = np.argsort(xf, kind="stable")
        xs = xf[order]
        gs = np.cumsum(g[idx][order])
        hs = np.cumsum(h[idx][order])
        valid = np.nonzero(xs[:-1] < xs[1:])[0]
        if len(valid) == 0:
            continue
        GL = gs[valid]
        HL = hs[valid]
        GR = G - GL
        HR = H - HL
        if params.min_child_hessian > 0:
            ok = (HL >= params.min_child_hessian) & (HR >= params.min_child_hessian)
            valid, GL, HL, GR, HR = valid[ok], GL[ok], HL[ok], GR[ok], HR[ok]
            if len(valid) == 0:
                continue
        gains = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent_score) - params.gamma_min_gain
        k = int(np.argmax(gains))  # first max: lowest threshold wins ties
        if gains[k] > best_gain:
            threshold = 0.5 * (xs[valid[k]] + xs[valid[k] + 1])
            mask = xf <= threshold
            best = (float(gains[k]), f, float(threshold), idx[mask], idx[~mask])
            best_gain = float(gains[k])
    return best


def _grow_tree(X, g, h, idx, depth, params: BoostParams) -> TreeNode:
    G = float(g[idx].sum())
    H = float(h[idx].sum())
    if depth < params.max_depth and len(idx) >= 2:
        found = _best_split(X, g, h, idx, params)
        if found is not None:
            _, f, threshold, left_idx, right_idx = found
            return TreeNode(
                cover=H,
                feature=f,
                threshold=threshold,
                left=_grow_tree(X, g, h, left_idx, depth + 1, params),
                right=_grow_tree(X, g, h, right_idx, depth + 1, params),
            )
    return TreeNode(cover=H, weight=_leaf_weight(G, H, params))


def _tree_outputs(node: TreeNode, X, idx, out) -> None:
    if node.is_leaf:
        out[idx] = node.weight
        return
    mask = X[idx, node.feature] <= node.threshold
    _tree_outputs(node.left, X, idx[mask], out)
    _tree_outputs(node.right, X, idx[~mask], out)


def fit(train: Dataset, params: BoostParams) -> TreeEnsemble:
    """Fit the boosted ensemble on a training table.

    Each round fits one tree to the current residual gradients
    (g = prediction - target, h = 1), on a seeded row subsample when
    ``subsample`` < 1. The per-round training RMSE lands in the returned
    ensemble's ``train_rmse``; with subsample = 1 that sequence is
    non-increasing.
    """
    n = len(train)
    if n < 2:
        raise DomainError("need at least 2 training rows")
    if train.X.shape[1] < 1:
        raise DomainError("need at least 1 feature")
    if not (np.all(np.isfinite(train.X)) and np.all(np.isfinite(train.y))):
        raise DomainError("non-finite feature or target values")

    X = np.ascontiguousarray(train.X, dtype=float)
    y = np.asarray(train.y, dtype=float)
    base = float(y.mean())
    acc = np.zeros(n)  # running sum of per-tree leaf outputs
    all_idx = np.arange(n)
    n_sub = max(1, int(params.subsample * n))

    trees: list[TreeNode] = []
    train_rmse: list[float] = []
    for m in range(params.n_rounds):
        pred = base + params.learning_rate * acc
        g = pred - y
        h = np.ones(n)
        if n_sub < n:
            rows = np.sort(np.random.default_rng([params.seed, m]).choice(n, size=n_sub, replace=False))
        else:
            rows = all_idx
        tree = _grow_tree(X, g, h, rows, 0, params)
        trees.append(tree)
        out = np.empty(n)
        _tree_outputs(tree, X, all_idx, out)
        acc += out
        resid = base + params.learning_rate * acc - y
        train_rmse.append(float(np.sqrt(np.mean(resid**2))))

    return TreeEnsemble(
        trees=trees,
        base_prediction=base,
        params=params,
        feature_names=list(train.feature_names),
        train_rmse=train_rmse,
    )


def predict(ensemble: TreeEnsemble, rows) -> np.ndarray:
    """Score rows: base + learning_rate * sum of tree leaf outputs."""
    X = rows.X if isinstance(rows, Dataset) else np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(ensemble.feature_names):
        raise SchemaError(
            f"row has {X.shape[1]} features, model expects {len(ensemble.feature_names)}"
        )
    n = X.shape[0]
    acc = np.zeros(n)
    idx = np.arange(n)
    out = np.empty(n)
    for tree in ensemble.trees:
        _tree_outputs(tree, X, idx, out)
        acc += out
    return ensemble.base_prediction + ensemble.params.learning_rate * acc


@dataclass(frozen=True)
class EvalResult:
    rmse: float
    observed: list[float]
    predicted: list[float]


def evaluate(ensemble: TreeEnsemble, test: Dataset) -> EvalResult:
    """Held-out RMSE plus the (observed, predicted) pairs for plotting."""
    if len(test) == 0:
        raise DomainError("empty evaluation set")
    pred = predict(ensemble, test)
    rmse = float(np.sqrt(np.mean((pred - test.y) ** 2)))
    return EvalResult(rmse=rmse, observed=[float(v) for v in test.y], predicted=[float(v) for v in pred])


def grid_search_cv(
    train: Dataset,
    grid: list[BoostParams],
    folds: int = 10,
    seed: int = 0,
) -> tuple[BoostParams, list[list[float]]]:
    """Grid search by k-fold cross-validated RMSE.

    One seeded fold assignment is drawn up front and shared by every
    grid point, so scores are comparable. The winner minimizes mean
    validation RMSE; exact ties keep the earlier grid entry.
    """
    if not grid:
        raise DomainError("empty parameter grid")
    if folds < 2:
        raise DomainError("folds must be >= 2")
    n = len(train)
    if n < folds:
        raise DomainError(f"n={n} rows cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold_idx = np.array_split(perm, folds)

    fold_scores: list[list[float]] = []
    best_i = 0
    best_mean = None
    for i, params in enumerate(grid):
        scores = []
        for k in range(folds):
            val = fold_idx[k]
            fit_rows = np.concatenate([fold_idx[j] for j in range(folds) if j != k])
            ensemble = fit(train.take(fit_rows), params)
            scores.append(evaluate(ensemble, train.take(val)).rmse)
        fold_scores.append(scores)
        mean = sum(scores) / len(scores)
        if best_mean is None or mean < best_mean:
            best_mean = mean
            best_i = i
    return grid[best_i], fold_scores


@dataclass
class FitReport:
    """Everything the model stage reports: tuning, fit, held-out error."""

    best_params: BoostParams
    fold_scores: list[list[float]]
    train_rmse: list[float]
    test_rmse: float
    observed: list[float]
    predicted: list[float]

    def to_dict(self) -> dict:
        return {
            "best_params": self.best_params.to_dict(),
            "fold_scores": self.fold_scores,
            "train_rmse": self.train_rmse,
            "test_rmse": self.test_rmse,
            "observed": self.observed,
            "predicted": self.predicted,
        }


ENSEMBLE_FORMAT_VERSION = 1


def ensemble_to_json(ensemble: TreeEnsemble) -> str:
    doc = {
        "format_version": ENSEMBLE_FORMAT_VERSION,
        "base_prediction": ensemble.base_prediction,
        "params": ensemble.params.to_dict(),
        "feature_names": ensemble.feature_names,
        "train_rmse": ensemble.train_rmse,
        "trees": [t.to_dict() for t in ensemble.trees],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def ensemble_from_json(text: str) -> TreeEnsemble:
    doc = json.loads(text)
    if doc.get("format_version") != ENSEMBLE_FORMAT_VERSION:
        raise SchemaError(f"unsupported ensemble format {doc.get('format_version')!r}")
    return TreeEnsemble(
        trees=[TreeNode.from_dict(t) for t in doc["trees"]],
        base_prediction=float(doc["base_prediction"]),
        params=BoostParams(**doc["params"]),
        feature_names=list(doc["feature_names"]),
        train_rmse=[float(v) for v in doc.get("train_rmse", [])],
    )
