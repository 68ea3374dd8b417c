"""Synthetic worlds with planted coverage-bias drivers, plus oracles.

Worlds are grids of unit-square areas with log-normal census counts and
seeded covariate surfaces (optionally spatially smoothed by neighbor
averaging, to plant clustering). Device counts follow

    count_i = census_i * penetration(x_i) * exp(eps_i),  eps ~ N(0, sigma^2)

so the planted penetration function is the ground-truth bias driver.

Two brute-force oracles ship here rather than in the test suite, so any
run can be audited: a double-loop Moran's I and a subset-enumeration
Shapley evaluator. Both are deliberately naive; the fast
implementations elsewhere must agree with them to tight tolerances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .boost import TreeEnsemble, TreeNode
from .errors import DegenerateInput, DomainError, SchemaError
from .ingest import Area, AreaSet, CountTable, CovariateTable, Feature
from .spatial import SpatialWeights

PENETRATION_FORMS = ("linear", "logistic", "u_shape", "threshold")
COVARIATE_DISTS = ("normal", "uniform", "lognormal")
SMALL_COUNT_THRESHOLD = 10.0
PENETRATION_MAX = 1.5


@dataclass(frozen=True)
class CovariateGen:
    """Generator for one covariate surface."""

    name: str
    group: str
    dist: str = "normal"
    loc: float = 0.0
    scale: float = 1.0
    smoothing: float = 0.0  # neighbor-average mixing strength in [0, 1]

    def __post_init__(self):
        Feature(self.name, self.group)  # reuse the group whitelist
        if self.dist not in COVARIATE_DISTS:
            raise SchemaError(f"unknown covariate distribution {self.dist!r}")
        if self.scale <= 0:
            raise DomainError("covariate scale must be > 0")
        if not (0.0 <= self.smoothing <= 1.0):
            raise DomainError("smoothing must be in [0, 1]")

    @property
    def qualified(self) -> str:
        return f"{self.group}:{self.name}"


@dataclass(frozen=True)
class PenetrationSpec:
    """Named penetration form over a linear covariate score.

    The score is s = intercept + sum_f coef_f * x_f. Forms map it to a
    penetration rate: 'linear' returns s itself; 'logistic' squashes to
    (low, high); 'u_shape' returns low + (high-low)*min(s^2, 1);
    'threshold' steps from low to high at s = 0.
    """

    form: str
    coefficients: dict[str, float] = field(default_factory=dict)
    intercept: float = 0.0
    low: float = 0.05
    high: float = 0.95

    def __post_init__(self):
        if self.form not in PENETRATION_FORMS:
            raise SchemaError(f"unknown penetration form {self.form!r}")
        if not (self.low < self.high):
            raise DomainError("penetration low must be < high")

    def evaluate(self, score: np.ndarray) -> np.ndarray:
        if self.form == "linear":
            return np.asarray(score, dtype=float)
        span = self.high - self.low
        if self.form == "logistic":
            return self.low + span / (1.0 + np.exp(-score))
        if self.form == "u_shape":
            return self.low + span * np.minimum(score**2, 1.0)
        return np.where(score < 0.0, self.low, self.high)


@dataclass(frozen=True)
class ScenarioSpec:
    rows: int
    cols: int
    covariates: tuple[CovariateGen, ...]
    penetration: PenetrationSpec
    noise_sigma: float = 0.0
    seed: int = 0
    census_log_mean: float = 8.0
    census_log_sigma: float = 0.5
    small_count_drop: bool = False
    source_id: str = "synthetic"
    reference_period: str = "2021-01-01/2021-12-31"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DomainError("grid must have at least 1 row and 1 column")
        if self.noise_sigma < 0 or self.census_log_sigma < 0:
            raise DomainError("sigma parameters must be >= 0")
        names = [g.qualified for g in self.covariates]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate covariate names")
        for key in self.penetration.coefficients:
            if key not in names:
                raise SchemaError(
                    f"penetration coefficient references undeclared covariate {key!r}"
                )

    @property
    def n_areas(self) -> int:
        return self.rows * self.cols


def _grid_ids(rows: int, cols: int) -> list[str]:
    return [f"r{r:03d}c{c:03d}" for r in range(rows) for c in range(cols)]


def _grid_areas(rows: int, cols: int) -> AreaSet:
    areas = []
    for r in range(rows):
        for c in range(cols):
            poly = Polygon([(c, r), (c + 1, r), (c + 1, r + 1), (c, r + 1)])
            areas.append(
                Area(
                    area_id=f"r{r:03d}c{c:03d}",
                    name=f"cell {r},{c}",
                    geometry=poly,
                    centroid=(poly.centroid.x, poly.centroid.y),
                )
            )
    return AreaSet(areas)


def _neighbor_mean(grid: np.ndarray) -> np.ndarray:
    """Mean over the 8-neighborhood; cells with no neighbors keep their
    own value (1x1 grid)."""
    rows, cols = grid.shape
    total = np.zeros_like(grid)
    count = np.zeros_like(grid)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            tgt = (
                slice(max(0, -dr), rows - max(0, dr)),
                slice(max(0, -dc), cols - max(0, dc)),
            )
            src = (
                slice(max(0, dr), rows + min(0, dr)),
                slice(max(0, dc), cols + min(0, dc)),
            )
            total[tgt] += grid[src]
            count[tgt] += 1.0
    out = grid.copy()
    mask = count > 0
    out[mask] = total[mask] / count[mask]
    return out


def _draw_covariate(gen: CovariateGen, rows: int, cols: int, rng) -> np.ndarray:
    n = rows * cols
    if gen.dist == "normal":
        x = gen.loc + gen.scale * rng.standard_normal(n)
    elif gen.dist == "uniform":
        x = rng.uniform(gen.loc, gen.loc + gen.scale, n)
    else:
        x = rng.lognormal(mean=gen.loc, sigma=gen.scale, size=n)
    if gen.smoothing > 0.0:
        g = x.reshape(rows, cols)
        g = (1.0 - gen.smoothing) * g + gen.smoothing * _neighbor_mean(g)
        x = g.reshape(n)
    return x


def generate_world(spec: ScenarioSpec):
    """Build (AreaSet, census CountTable, CovariateTable), fully seeded.

    Census counts are log-normal(census_log_mean, census_log_sigma),
    rounded and floored at 1 so no area has zero reference population.
    Covariate j draws from substream [seed, 100 + j]; the census from
    [seed, 0].
    """
    areas = _grid_areas(spec.rows, spec.cols)
    ids = _grid_ids(spec.rows, spec.cols)

    rng = np.random.default_rng([spec.seed, 0])
    draws = rng.lognormal(mean=spec.census_log_mean, sigma=spec.census_log_sigma, size=spec.n_areas)
    census_counts = np.maximum(1.0, np.round(draws))
    census = CountTable(
        source_id="census",
        reference_period=spec.reference_period,
        rows={a: float(v) for a, v in zip(ids, census_counts)},
    )

    columns = []
    for j, gen in enumerate(spec.covariates):
        rng_j = np.random.default_rng([spec.seed, 100 + j])
        columns.append(_draw_covariate(gen, spec.rows, spec.cols, rng_j))
    matrix = np.column_stack(columns) if columns else np.zeros((spec.n_areas, 0))
    covariates = CovariateTable(
        features=[Feature(g.name, g.group) for g in spec.covariates],
        rows={a: matrix[i] for i, a in enumerate(ids)},
    )
    return areas, census, covariates


def generate_counts(world, spec: ScenarioSpec) -> CountTable:
    """Device-source counts for a generated world.

    count_i = census_i * penetration(x_i) * exp(eps_i), eps from
    substream [seed, 1], clipped at 0. Penetration outside [0, 1.5]
    rejects the scenario. With small_count_drop, counts under 10 are
    zeroed (the row stays, mirroring privacy suppression of small
    cells).
    """
    areas, census, covariates = world
    ids = list(census.rows)
    coef = np.zeros(len(spec.covariates))
    qualified = [g.qualified for g in spec.covariates]
    for key, value in spec.penetration.coefficients.items():
        coef[qualified.index(key)] = value
    X = covariates.matrix(ids)
    score = spec.penetration.intercept + (X @ coef if len(coef) else np.zeros(len(ids)))
    p = spec.penetration.evaluate(score)
    if np.any(p < 0.0) or np.any(p > PENETRATION_MAX):
        bad = float(p[np.argmax((p < 0.0) | (p > PENETRATION_MAX))])
        raise DomainError(
            f"penetration {bad:.4g} outside [0, {PENETRATION_MAX}]; adjust the scenario"
        )
    if spec.noise_sigma > 0.0:
        eps = np.random.default_rng([spec.seed, 1]).normal(0.0, spec.noise_sigma, len(ids))
    else:
        eps = np.zeros(len(ids))
    census_vec = np.array([census.rows[a] for a in ids])
    counts = np.maximum(census_vec * p * np.exp(eps), 0.0)
    if spec.small_count_drop:
        counts = np.where(counts < SMALL_COUNT_THRESHOLD, 0.0, counts)
    return CountTable(
        source_id=spec.source_id,
        reference_period=spec.reference_period,
        rows={a: float(v) for a, v in zip(ids, counts)},
    )


def _expvalue(node: TreeNode, x: np.ndarray, mask: int) -> float:
    """Cover-conditional tree expectation given the feature subset mask."""
    if node.is_leaf:
        return node.weight
    if (mask >> node.feature) & 1:
        child = node.left if x[node.feature] <= node.threshold else node.right
        return _expvalue(child, x, mask)
    wl = node.left.cover / node.cover
    wr = node.right.cover / node.cover
    return wl * _expvalue(node.left, x, mask) + wr * _expvalue(node.right, x, mask)


def shapley_bruteforce(ensemble: TreeEnsemble, row) -> np.ndarray:
    """Exact Shapley values by 2^F subset enumeration.

    Uses the identical cover-conditional expectation as the fast path,
    so the two must agree to float tolerance. Feasible only for small
    feature counts.
    """
    x = np.asarray(row, dtype=float).reshape(-1)
    n_features = len(ensemble.feature_names)
    if len(x) != n_features:
        raise SchemaError(f"row has {len(x)} features, model expects {n_features}")
    if n_features > 12:
        raise DomainError(f"{n_features} features is too many for subset enumeration")

    lr = ensemble.params.learning_rate
    v = np.empty(1 << n_features)
    for mask in range(1 << n_features):
        v[mask] = lr * sum(_expvalue(t, x, mask) for t in ensemble.trees)

    fact = [math.factorial(i) for i in range(n_features + 1)]
    denom = fact[n_features]
    phi = np.zeros(n_features)
    for mask in range(1 << n_features):
        size = mask.bit_count()
        weight = fact[size] * fact[n_features - size - 1] / denom if size < n_features else 0.0
        for f in range(n_features):
            bit = 1 << f
            if not mask & bit:
                phi[f] += weight * (v[mask | bit] - v[mask])
    return phi


def morans_naive(values: dict[str, float], w: SpatialWeights) -> float:
    """Double-loop Moran's I, kept free of the fast implementation.

    Same conventions: isolates drop out of n, S0 and every sum; weights
    pointing at isolates are ignored.
    """
    ids = w.nonisolate_ids()
    if len(ids) == 0:
        raise DomainError("all areas are isolates; Moran's I is undefined")
    if len(ids) < 2:
        raise DomainError("need at least 2 non-isolate areas")
    try:
        x = [float(values[a]) for a in ids]
    except KeyError as exc:
        raise SchemaError(f"no value for area {exc.args[0]!r}") from None
    if not all(math.isfinite(v) for v in x):
        raise DomainError("non-finite values passed to Moran's I")

    n = len(ids)
    mean = sum(x) / n
    z = {a: x[i] - mean for i, a in enumerate(ids)}
    denom = sum(v * v for v in z.values())
    if denom == 0.0:
        raise DegenerateInput("values have zero variance")
    keep = set(ids)
    num = 0.0
    s0 = 0.0
    for a in ids:
        for nbr, weight in w.neighbors[a]:
            if nbr in keep:
                num += weight * z[a] * z[nbr]
                s0 += weight
    if s0 == 0.0:
        raise DomainError("weight sum S0 is zero over non-isolate areas")
    return (n / s0) * num / denom


_SCENARIO_KEYS = {
    "rows",
    "cols",
    "noise_sigma",
    "seed",
    "census",
    "covariates",
    "penetration",
    "small_count_drop",
    "source_id",
    "reference_period",
}


def scenario_from_dict(doc: dict) -> ScenarioSpec:
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise SchemaError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        census = doc.get("census", {})
        covariates = tuple(CovariateGen(**c) for c in doc.get("covariates", []))
        pen = dict(doc["penetration"])
        pen.setdefault("coefficients", {})
        penetration = PenetrationSpec(
            form=pen["form"],
            coefficients={str(k): float(v) for k, v in pen["coefficients"].items()},
            intercept=float(pen.get("intercept", 0.0)),
            low=float(pen.get("low", 0.05)),
            high=float(pen.get("high", 0.95)),
        )
        return ScenarioSpec(
            rows=int(doc["rows"]),
            cols=int(doc["cols"]),
            covariates=covariates,
            penetration=penetration,
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            seed=int(doc.get("seed", 0)),
            census_log_mean=float(census.get("log_mean", 8.0)),
            census_log_sigma=float(census.get("log_sigma", 0.5)),
            small_count_drop=bool(doc.get("small_count_drop", False)),
            source_id=str(doc.get("source_id", "synthetic")),
            reference_period=str(doc.get("reference_period", "2021-01-01/2021-12-31")),
        )
    except KeyError as exc:
        raise SchemaError(f"scenario is missing required key {exc.args[0]!r}") from None
    except TypeError as exc:
        raise SchemaError(f"malformed scenario: {exc}") from None


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "rows": spec.rows,
        "cols": spec.cols,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "census": {"log_mean": spec.census_log_mean, "log_sigma": spec.census_log_sigma},
        "covariates": [
            {
                "name": g.name,
                "group": g.group,
                "dist": g.dist,
                "loc": g.loc,
                "scale": g.scale,
                "smoothing": g.smoothing,
            }
            for g in spec.covariates
        ],
        "penetration": {
            "form": spec.penetration.form,
            "coefficients": dict(spec.penetration.coefficients),
            "intercept": spec.penetration.intercept,
            "low": spec.penetration.low,
            "high": spec.penetration.high,
        },
        "small_count_drop": spec.small_count_drop,
        "source_id": spec.source_id,
        "reference_period": spec.reference_period,
    }


def load_scenario(path) -> ScenarioSpec:
    """Read a scenario from a .toml or .json file."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    elif path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        raise SchemaError(f"scenario file must be .toml or .json, got {path.name!r}")
    if not isinstance(doc, dict):
        raise SchemaError("scenario file must contain a table at top level")
    return scenario_from_dict(doc)
