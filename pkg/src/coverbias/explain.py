"""Attribution of modeled bias to covariates, plus figure-data exports.

The attribution is exact per-tree Shapley values of the tree function
under the cover-weighted (training-distribution) conditional
expectation, computed by the polynomial-time path-weight recursion
rather than subset enumeration. Ensemble attributions are the per-tree
values summed and scaled by the learning rate, so

    expected_value + sum_f shap[row, f] == prediction(row)

holds to float precision for every row (local accuracy). A brute-force
subset-enumeration oracle for the same conditional game lives in the
synthetic-data module and is only feasible for small feature counts.

Figure exports: min-max normalized importance scores, beeswarm records
for the top features, and LOESS dependence curves with 95% pointwise
bands.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .boost import TreeEnsemble, TreeNode
from .errors import DegenerateInput, DomainError, SchemaError

RADIAL_THRESHOLD = 0.5
TOP_FEATURES = 20


@dataclass
class ShapMatrix:
    """Per-area, per-feature attributions in bias percentage points."""

    area_ids: list[str]
    feature_names: list[str]
    values: np.ndarray  # (n_areas, n_features)
    expected_value: float

    def local_accuracy_gap(self, predictions) -> float:
        """Max |expected_value + row sum - prediction| over rows."""
        totals = self.expected_value + self.values.sum(axis=1)
        return float(np.max(np.abs(totals - np.asarray(predictions)))) if len(totals) else 0.0

    def mean_abs(self) -> np.ndarray:
        return np.mean(np.abs(self.values), axis=0)


def _check_cover(node: TreeNode) -> None:
    if node.cover is None or not math.isfinite(node.cover) or node.cover <= 0:
        raise SchemaError("tree node lacks a positive training cover count")
    if not node.is_leaf:
        _check_cover(node.left)
        _check_cover(node.right)
        total = node.left.cover + node.right.cover
        if abs(total - node.cover) > 1e-6 * max(1.0, node.cover):
            raise SchemaError("child cover counts do not sum to parent cover")


def _tree_mean(node: TreeNode) -> float:
    """Cover-weighted mean leaf value (the tree's marginal expectation)."""
    if node.is_leaf:
        return node.weight
    wl = node.left.cover / node.cover
    wr = node.right.cover / node.cover
    return wl * _tree_mean(node.left) + wr * _tree_mean(node.right)


def expected_value(ensemble: TreeEnsemble) -> float:
    total = 0.0
    for tree in ensemble.trees:
        _check_cover(tree)
        total += _tree_mean(tree)
    return ensemble.base_prediction + ensemble.params.learning_rate * total


def _extend(d, z, o, w, pz, po, pi):
    length = len(w)
    d = d + [pi]
    z = z + [pz]
    o = o + [po]
    w = w + [1.0 if length == 0 else 0.0]
    for i in range(length - 1, -1, -1):
        w[i + 1] += po * w[i] * (i + 1) / (length + 1)
        w[i] = pz * w[i] * (length - i) / (length + 1)
    return d, z, o, w


def _unwind(d, z, o, w, i):
    length = len(w)
    zi, oi = z[i], o[i]
    nw = w[:-1]
    n = w[length - 1]
    if oi != 0.0:
        for j in range(length - 2, -1, -1):
            t = w[j]
            nw[j] = n * length / ((j + 1) * oi)
            n = t - nw[j] * zi * (length - 1 - j) / length
    else:
        for j in range(length - 2, -1, -1):
            nw[j] = w[j] * length / (zi * (length - 1 - j))
    return (
        d[:i] + d[i + 1 :],
        z[:i] + z[i + 1 :],
        o[:i] + o[i + 1 :],
        nw,
    )


def _unwound_sum(z, o, w, i):
    """Sum of the path weights after removing entry i, without copying."""
    length = len(w)
    zi, oi = z[i], o[i]
    total = 0.0
    if oi != 0.0:
        n = w[length - 1]
        for j in range(length - 2, -1, -1):
            tmp = n * length / ((j + 1) * oi)
            total += tmp
            n = w[j] - tmp * zi * (length - 1 - j) / length
    else:
        for j in range(length - 2, -1, -1):
            total += w[j] * length / (zi * (length - 1 - j))
    return total


def _find_first(d, feature):
    for i in range(1, len(d)):
        if d[i] == feature:
            return i
    return None


def _recurse(node, d, z, o, w, pz, po, pi, x, phi):
    d, z, o, w = _extend(d, z, o, w, pz, po, pi)
    if node.is_leaf:
        for i in range(1, len(w)):
            phi[d[i]] += _unwound_sum(z, o, w, i) * (o[i] - z[i]) * node.weight
        return
    if x[node.feature] <= node.threshold:
        hot, cold = node.left, node.right
    else:
        hot, cold = node.right, node.left
    iz = io = 1.0
    k = _find_first(d, node.feature)
    if k is not None:
        iz, io = z[k], o[k]
        d, z, o, w = _unwind(d, z, o, w, k)
    _recurse(hot, d, z, o, w, iz * hot.cover / node.cover, io, node.feature, x, phi)
    _recurse(cold, d, z, o, w, iz * cold.cover / node.cover, 0.0, node.feature, x, phi)


def _shap_row(ensemble: TreeEnsemble, x: np.ndarray) -> np.ndarray:
    phi = np.zeros(len(ensemble.feature_names))
    for tree in ensemble.trees:
        # -1 is a sentinel feature index for the root path entry
        _recurse(tree, [], [], [], [], 1.0, 1.0, -1, x, phi)
    return ensemble.params.learning_rate * phi


def tree_shap(ensemble: TreeEnsemble, rows, n_threads: int = 1) -> ShapMatrix:
    """Exact attributions for every row under the cover-weighted game.

    Rows are independent; with n_threads > 1 they are scored in
    contiguous chunks and written back by index, so the result does not
    depend on the thread count.
    """
    from .boost import Dataset

    if isinstance(rows, Dataset):
        X = rows.X
        area_ids = list(rows.area_ids)
    else:
        X = np.asarray(rows, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        area_ids = [str(i) for i in range(X.shape[0])]
    if X.shape[1] != len(ensemble.feature_names):
        raise SchemaError(
            f"rows have {X.shape[1]} features, model expects {len(ensemble.feature_names)}"
        )
    for tree in ensemble.trees:
        _check_cover(tree)

    n = X.shape[0]
    values = np.zeros((n, len(ensemble.feature_names)))

    def work(lo, hi):
        for i in range(lo, hi):
            values[i] = _shap_row(ensemble, X[i])

    n_threads = max(1, int(n_threads))
    if n_threads == 1 or n < 2 * n_threads:
        work(0, n)
    else:
        bounds = np.linspace(0, n, n_threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = [pool.submit(work, bounds[t], bounds[t + 1]) for t in range(n_threads)]
            for f in futures:
                f.result()

    return ShapMatrix(
        area_ids=area_ids,
        feature_names=list(ensemble.feature_names),
        values=values,
        expected_value=expected_value(ensemble),
    )


@dataclass(frozen=True)
class ImportanceRow:
    feature: str
    mean_abs_shap: float
    normalized: float
    rank: int
    above_threshold: bool

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "mean_abs_shap": self.mean_abs_shap,
            "normalized": self.normalized,
            "rank": self.rank,
            "above_threshold": self.above_threshold,
        }


@dataclass
class ImportanceProfile:
    rows: list[ImportanceRow]  # ordered by rank (1 = most important)
    degenerate: bool

    def feature_order(self) -> list[str]:
        return [r.feature for r in self.rows]

    def to_records(self) -> list[dict]:
        return [r.to_dict() for r in self.rows]


def importance_profile(shap: ShapMatrix) -> ImportanceProfile:
    """Mean |SHAP| per feature, min-max normalized to [0, 1].

    With a single feature, or all raw scores equal, the normalization is
    undefined; every score becomes 1 and the profile is flagged
    degenerate. Features whose normalized score exceeds 0.5 carry a
    highlight flag for the radial chart.
    """
    if len(shap.feature_names) < 1:
        raise DomainError("need at least one feature")
    raw = shap.mean_abs()
    lo, hi = float(raw.min()), float(raw.max())
    if len(raw) == 1 or hi == lo:
        normalized = np.ones_like(raw)
        degenerate = True
    else:
        normalized = (raw - lo) / (hi - lo)
        degenerate = False
    order = np.argsort(-raw, kind="stable")  # ties keep feature order
    rows = [
        ImportanceRow(
            feature=shap.feature_names[j],
            mean_abs_shap=float(raw[j]),
            normalized=float(normalized[j]),
            rank=pos + 1,
            above_threshold=bool(normalized[j] > RADIAL_THRESHOLD),
        )
        for pos, j in enumerate(order)
    ]
    return ImportanceProfile(rows=rows, degenerate=degenerate)


def _rank_percentiles(col: np.ndarray) -> np.ndarray:
    """Average-rank percentiles on a 0..100 scale; a lone value sits at 50."""
    n = len(col)
    if n == 1:
        return np.array([50.0])
    order = np.argsort(col, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n, dtype=float)
    # average ranks within tied groups
    uniq, inverse, counts = np.unique(col, return_inverse=True, return_counts=True)
    if len(uniq) < n:
        sums = np.zeros(len(uniq))
        np.add.at(sums, inverse, ranks)
        ranks = (sums / counts)[inverse]
    return 100.0 * ranks / (n - 1)


def beeswarm_export(shap: ShapMatrix, covariates) -> list[dict]:
    """Records for the top features by mean |SHAP|, in rank order.

    One record per (feature, area): the attribution, the raw feature
    value, and the value's percentile within the feature column, which
    drives the beeswarm color scale.
    """
    X = covariates.matrix(shap.area_ids)
    name_to_col = {name: i for i, name in enumerate(shap.feature_names)}
    profile = importance_profile(shap)
    records = []
    for row in profile.rows[:TOP_FEATURES]:
        j = name_to_col[row.feature]
        pct = _rank_percentiles(X[:, j])
        for i, area_id in enumerate(shap.area_ids):
            records.append(
                {
                    "feature": row.feature,
                    "rank": row.rank,
                    "area_id": area_id,
                    "shap": float(shap.values[i, j]),
                    "value": float(X[i, j]),
                    "percentile": float(pct[i]),
                }
            )
    return records


@dataclass
class LoessCurve:
    grid: np.ndarray
    fit: np.ndarray
    se: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.fit - 1.96 * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.fit + 1.96 * self.se


def _local_weights(x: np.ndarray, x0: float, k: int) -> np.ndarray:
    """Tricube weights over the k nearest points; zeros elsewhere."""
    dist = np.abs(x - x0)
    cut = np.partition(dist, k - 1)[k - 1]
    w = np.zeros_like(x)
    if cut == 0.0:
        w[dist == 0.0] = 1.0
        return w
    inside = dist <= cut
    u = dist[inside] / cut
    w[inside] = (1.0 - u**3) ** 3
    return w


def _local_fit(x: np.ndarray, y: np.ndarray, x0: float, k: int):
    """Degree-1 weighted fit at x0; returns (fit, hat vector l)."""
    w = _local_weights(x, x0, k)
    if w.sum() <= 0.0:
        # every neighbor sits exactly on the kernel edge: weight them evenly
        dist = np.abs(x - x0)
        cut = np.partition(dist, k - 1)[k - 1]
        w = (dist <= cut).astype(float)
    sw = float(w.sum())
    t = x - x0
    s1 = float(w @ t)
    s2 = float(w @ (t * t))
    det = sw * s2 - s1 * s1
    scale = sw * max(float(np.max(t * t)), 1.0)
    if det <= 1e-12 * scale:
        # usable points share one x value: fall back to their weighted mean
        l = w / sw
        return float(l @ y), l
    l = w * (s2 - s1 * t) / det
    return float(l @ y), l


def loess_curve(x, y, frac: float = 0.75, n_grid: int = 100) -> LoessCurve:
    """Local degree-1 regression with a 95% pointwise band.

    Tricube kernel over the nearest ceil(frac*n) points, evaluated at
    n_grid equally spaced points across the data range. The band is
    fit +- 1.96*SE with SE = sigma * ||l(x0)||, where l is the local
    least-squares hat vector and sigma^2 the residual variance with
    trace-of-hat degrees of freedom.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 3:
        raise DomainError("need at least 3 points for a local fit")
    if not (0.0 < frac <= 1.0):
        raise DomainError("frac must be in (0, 1]")
    if float(x.min()) == float(x.max()):
        raise DegenerateInput("constant x values")
    k = min(n, max(2, math.ceil(frac * n)))

    fitted = np.empty(n)
    leverage = np.empty(n)
    for i in range(n):
        fitted[i], l = _local_fit(x, y, x[i], k)
        leverage[i] = l[i]
    rss = float(np.sum((y - fitted) ** 2))
    dof = max(n - float(leverage.sum()), 1.0)
    sigma2 = rss / dof

    grid = np.linspace(float(x.min()), float(x.max()), n_grid)
    fit = np.empty(n_grid)
    se = np.empty(n_grid)
    for g in range(n_grid):
        fit[g], l = _local_fit(x, y, grid[g], k)
        se[g] = math.sqrt(sigma2 * float(l @ l))
    return LoessCurve(grid=grid, fit=fit, se=se)


@dataclass
class DependenceExport:
    feature: str
    x: np.ndarray  # feature values per area
    shap: np.ndarray  # attribution per area
    shap_curve: LoessCurve
    target: np.ndarray | None = None  # per-area outcome, if provided
    target_curve: LoessCurve | None = None

    def to_dict(self) -> dict:
        def series(curve: LoessCurve) -> dict:
            return {
                "grid": [float(v) for v in curve.grid],
                "fit": [float(v) for v in curve.fit],
                "lower": [float(v) for v in curve.lower],
                "upper": [float(v) for v in curve.upper],
            }

        doc = {
            "feature": self.feature,
            "x": [float(v) for v in self.x],
            "shap": [float(v) for v in self.shap],
            "shap_curve": series(self.shap_curve),
        }
        if self.target is not None:
            doc["target"] = [float(v) for v in self.target]
            doc["target_curve"] = series(self.target_curve)
        return doc


def dependence_export(
    shap: ShapMatrix,
    covariates,
    feature,
    loess_frac: float = 0.75,
    target=None,
) -> DependenceExport:
    """Scatter plus smoothed trend of attribution against one feature.

    When per-area outcome values are supplied the same smoother runs on
    outcome-vs-feature too, so a renderer can overlay either reading.
    """
    if isinstance(feature, int):
        name = shap.feature_names[feature]
    else:
        name = feature
        if name not in shap.feature_names:
            raise SchemaError(f"unknown feature {name!r}")
    j = shap.feature_names.index(name)

    n = len(shap.area_ids)
    if n < 10:
        raise DomainError(f"need at least 10 areas for a dependence curve, got {n}")
    X = covariates.matrix(shap.area_ids)
    x = X[:, j]
    if float(x.min()) == float(x.max()):
        raise DegenerateInput(f"feature {name!r} is constant")
    sv = shap.values[:, j]
    shap_curve = loess_curve(x, sv, frac=loess_frac)

    target_arr = None
    target_curve = None
    if target is not None:
        target_arr = np.asarray(target, dtype=float)
        if len(target_arr) != n:
            raise SchemaError("target length does not match areas")
        target_curve = loess_curve(x, target_arr, frac=loess_frac)

    return DependenceExport(
        feature=name,
        x=x,
        shap=sv,
        shap_curve=shap_curve,
        target=target_arr,
        target_curve=target_curve,
    )


def shap_report_payload(shap: ShapMatrix) -> dict:
    """JSON-ready dump of the attribution matrix."""
    return {
        "expected_value": shap.expected_value,
        "feature_names": list(shap.feature_names),
        "area_ids": list(shap.area_ids),
        "values": [[float(v) for v in row] for row in shap.values],
    }
