"""Spatial structure of the bias surface.

Builds neighbor weights under queen contiguity, k-nearest-neighbor and
distance-band schemes, measures global spatial autocorrelation with
Moran's I, attaches permutation (pseudo) p-values, and quantifies the
bias/population-size association with Pearson's r.

Moran's I here is the classic cross-product statistic

    I = (n / S0) * sum_ij w_ij z_i z_j / sum_i z_i^2,   z_i = x_i - mean(x)

with isolates (empty weight rows) excluded from n, S0 and all sums.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc
from shapely import STRtree

from .errors import DegenerateInput, DomainError, SchemaError
from .ingest import AreaSet

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km; accepts scalars or arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float)) for v in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


class SpatialWeights:
    """Sparse neighbor weights under a named scheme.

    ``neighbors`` maps every area id to a list of (neighbor_id, weight)
    pairs; an empty list marks an isolate. Self-neighbors and negative
    weights are rejected. When ``row_standardized`` is set, each
    non-isolate row must sum to 1 within 1e-12.
    """

    def __init__(self, scheme: str, neighbors: dict[str, list[tuple[str, float]]], row_standardized: bool):
        for area_id, row in neighbors.items():
            for nbr, weight in row:
                if nbr == area_id:
                    raise DomainError(f"self-neighbor for {area_id!r}")
                if nbr not in neighbors:
                    raise SchemaError(f"neighbor {nbr!r} of {area_id!r} is not a known area")
                if weight < 0 or not np.isfinite(weight):
                    raise DomainError(f"bad weight {weight} for pair ({area_id!r}, {nbr!r})")
            if row_standardized and row:
                s = sum(w for _, w in row)
                if abs(s - 1.0) > 1e-12:
                    raise DomainError(f"row for {area_id!r} sums to {s}, expected 1")
        self.scheme = scheme
        self.neighbors = neighbors
        self.row_standardized = row_standardized

    @property
    def ids(self) -> list[str]:
        return list(self.neighbors.keys())

    def isolates(self) -> list[str]:
        return [a for a, row in self.neighbors.items() if not row]

    def nonisolate_ids(self) -> list[str]:
        return [a for a, row in self.neighbors.items() if row]

    def s0(self) -> float:
        return float(sum(w for row in self.neighbors.values() for _, w in row))

    def dense(self, ids: list[str]) -> np.ndarray:
        """Dense weight matrix over the given id ordering; weights into
        ids outside the ordering are dropped."""
        pos = {a: i for i, a in enumerate(ids)}
        W = np.zeros((len(ids), len(ids)))
        for a, row in self.neighbors.items():
            if a not in pos:
                continue
            for nbr, weight in row:
                if nbr in pos:
                    W[pos[a], pos[nbr]] = weight
        return W


def parse_scheme(spec: str) -> tuple[str, float | None]:
    """Parse 'queen', 'knn[:k]' or 'distance_band[:d_km]' descriptors."""
    kind, _, param = spec.strip().partition(":")
    kind = kind.strip().lower()
    if kind == "queen":
        if param:
            raise SchemaError("queen scheme takes no parameter")
        return "queen", None
    if kind == "knn":
        k = int(param) if param else 8
        if k < 1:
            raise DomainError(f"knn k must be >= 1, got {k}")
        return "knn", float(k)
    if kind == "distance_band":
        d = float(param) if param else None
        if d is not None and d <= 0:
            raise DomainError(f"distance band must be > 0, got {d}")
        return "distance_band", d
    raise SchemaError(f"unknown weighting scheme {spec!r}")


def _centroid_arrays(areas: AreaSet):
    lons = np.array([a.centroid[0] for a in areas])
    lats = np.array([a.centroid[1] for a in areas])
    return lons, lats


def _pairwise_km(areas: AreaSet) -> np.ndarray:
    lons, lats = _centroid_arrays(areas)
    return haversine_km(lons[:, None], lats[:, None], lons[None, :], lats[None, :])


def min_nonisolating_distance(areas: AreaSet) -> float:
    """Smallest band radius leaving no isolates: the largest
    nearest-neighbor distance among centroids."""
    d = _pairwise_km(areas)
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).max())


def build_weights(areas: AreaSet, scheme: str, row_standardize: bool = True) -> SpatialWeights:
    """Construct spatial weights over an AreaSet.

    queen: areas sharing any boundary point (edge or corner) are
    neighbors with weight 1; symmetric by construction. knn: the k
    nearest centroids by great-circle distance, weight 1, asymmetry
    allowed. distance_band: centroids within d km, weight 1; areas with
    no in-band neighbor become isolates with a warning. Rows are
    standardized to sum to 1 by default.
    """
    ids = areas.ids
    n = len(ids)
    if n < 2:
        raise DomainError("need at least 2 areas to build weights")
    kind, param = parse_scheme(scheme)
    neighbors: dict[str, list[tuple[str, float]]] = {a: [] for a in ids}

    if kind == "queen":
        label = "queen"
        geoms = [a.geometry for a in areas]
        tree = STRtree(geoms)
        for i, geom in enumerate(geoms):
            for j in tree.query(geom, predicate="intersects"):
                j = int(j)
                if j != i:
                    neighbors[ids[i]].append((ids[j], 1.0))
        for a in neighbors:
            neighbors[a].sort(key=lambda t: t[0])
    elif kind == "knn":
        k = int(param)
        if k >= n:
            raise DomainError(f"knn k={k} must be < number of areas ({n})")
        label = f"knn:{k}"
        d = _pairwise_km(areas)
        np.fill_diagonal(d, np.inf)
        for i in range(n):
            # stable argsort: equidistant neighbors resolve by input order
            nearest = np.argsort(d[i], kind="stable")[:k]
            neighbors[ids[i]] = [(ids[int(j)], 1.0) for j in nearest]
    else:
        d_km = param if param is not None else min_nonisolating_distance(areas)
        label = f"distance_band:{d_km:.6g}"
        d = _pairwise_km(areas)
        np.fill_diagonal(d, np.inf)
        for i in range(n):
            inband = np.nonzero(d[i] <= d_km)[0]
            neighbors[ids[i]] = [(ids[int(j)], 1.0) for j in inband]
            if len(inband) == 0:
                warnings.warn(f"area {ids[i]!r} is an isolate at band {d_km:.6g} km")

    if row_standardize:
        for a, row in neighbors.items():
            s = sum(w for _, w in row)
            if s > 0:
                neighbors[a] = [(nbr, w / s) for nbr, w in row]
    return SpatialWeights(scheme=label, neighbors=neighbors, row_standardized=row_standardize)


@dataclass(frozen=True)
class MoranResult:
    I: float
    p_value: float
    n_permutations: int
    scheme: str
    seed: int
    alternative: str = "greater"


class _MoranContext:
    """Ordered non-isolate view of (values, weights) shared by the
    observed statistic and its permutation replicates."""

    def __init__(self, values: dict[str, float], w: SpatialWeights):
        self.ids = w.nonisolate_ids()
        if len(self.ids) == 0:
            raise DomainError("all areas are isolates; Moran's I is undefined")
        if len(self.ids) < 2:
            raise DomainError("need at least 2 non-isolate areas")
        try:
            self.x = np.array([float(values[a]) for a in self.ids])
        except KeyError as exc:
            raise SchemaError(f"no value for area {exc.args[0]!r}") from None
        if not np.all(np.isfinite(self.x)):
            raise DomainError("non-finite values passed to Moran's I")
        self.z = self.x - self.x.mean()
        self.denom = float(self.z @ self.z)
        if self.denom == 0.0:
            raise DegenerateInput("values have zero variance")
        self.W = w.dense(self.ids)
        self.s0 = float(self.W.sum())
        if self.s0 == 0.0:
            raise DomainError("weight sum S0 is zero over non-isolate areas")
        self.n = len(self.ids)

    def statistic(self, z: np.ndarray) -> float:
        return float((self.n / self.s0) * (z @ self.W @ z) / self.denom)


def morans_i(values: dict[str, float], w: SpatialWeights) -> float:
    """Global Moran's I of a per-area value map under the given weights."""
    ctx = _MoranContext(values, w)
    return ctx.statistic(ctx.z)


def permutation_test(
    values: dict[str, float],
    w: SpatialWeights,
    n_permutations: int = 999,
    seed: int = 0,
    alternative: str = "greater",
) -> MoranResult:
    """Permutation inference for Moran's I.

    Values are reassigned to areas uniformly at random; permutation k
    draws from its own substream seeded by (seed, k), so any execution
    order (or parallel split) reproduces the sequential p-value. The
    pseudo p-value is (1 + #{I* >= I_obs}) / (1 + n_permutations) for
    the default positive-clustering alternative; "two_sided" counts
    |I*| >= |I_obs| instead. n_permutations = 0 yields p = 1.
    """
    if alternative not in ("greater", "two_sided"):
        raise SchemaError(f"unknown alternative {alternative!r}")
    if n_permutations < 0:
        raise DomainError("n_permutations must be >= 0")
    ctx = _MoranContext(values, w)
    i_obs = ctx.statistic(ctx.z)

    hits = 0
    if n_permutations > 0:
        perms = np.empty((n_permutations, ctx.n), dtype=np.intp)
        for k in range(n_permutations):
            perms[k] = np.random.default_rng([seed, k]).permutation(ctx.n)
        Z = ctx.z[perms]  # (n_perm, n)
        numer = np.einsum("ki,ki->k", Z @ ctx.W.T, Z)
        i_star = (ctx.n / ctx.s0) * numer / ctx.denom
        if alternative == "greater":
            hits = int(np.sum(i_star >= i_obs))
        else:
            hits = int(np.sum(np.abs(i_star) >= abs(i_obs)))
    p = (1 + hits) / (1 + n_permutations)
    return MoranResult(
        I=i_obs,
        p_value=p,
        n_permutations=n_permutations,
        scheme=w.scheme,
        seed=seed,
        alternative=alternative,
    )


def scheme_range(
    values: dict[str, float], weights_list: list[SpatialWeights]
) -> tuple[float, dict[str, float]]:
    """Spread of Moran's I across weighting schemes (max minus min).

    Returns the range together with the per-scheme statistics, so the
    robustness of any clustering verdict to the weight definition is
    visible at a glance.
    """
    if len(weights_list) < 2:
        raise DomainError("need at least 2 schemes for a range")
    per_scheme = {w.scheme: morans_i(values, w) for w in weights_list}
    vals = list(per_scheme.values())
    return max(vals) - min(vals), per_scheme


def pearson(x, y) -> tuple[float, float]:
    """Sample Pearson correlation with a two-sided t-test p-value.

    p comes from t = r*sqrt((n-2)/(1-r^2)) against the t distribution
    with n-2 degrees of freedom, evaluated through the regularized
    incomplete beta function.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise SchemaError("pearson expects two equal-length vectors")
    n = len(x)
    if n < 3:
        raise DomainError("pearson needs at least 3 observations")
    zx = x - x.mean()
    zy = y - y.mean()
    sxx = float(zx @ zx)
    syy = float(zy @ zy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("zero variance in pearson input")
    r = float(zx @ zy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    # two-sided: P(|T| >= t) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(df / 2.0, 0.5, df / (df + t2)))
    return r, p


def histogram_bins(values, n_bins: int = 20) -> tuple[list[float], list[int]]:
    """Equal-width histogram (edges, counts) for figure-data export."""
    v = np.asarray(list(values), dtype=float)
    if len(v) == 0:
        raise DegenerateInput("cannot bin an empty value set")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=n_bins, range=(lo, hi))
    return [float(e) for e in edges], [int(c) for c in counts]
