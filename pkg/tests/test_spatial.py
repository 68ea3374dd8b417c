"""Spatial weights, Moran's I, permutation inference, correlation."""

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from coverbias import spatial
from coverbias.errors import DegenerateInput, DomainError, SchemaError
from coverbias.ingest import Area, AreaSet

from _builders import grid_areas, path3


def path3_values(vals):
    return dict(zip(["r000c000", "r000c001", "r000c002"], vals))


# --- scheme parsing -------------------------------------------------------


@pytest.mark.parametrize(
    "text,expect",
    [
        ("queen", ("queen", None)),
        ("knn", ("knn", 8.0)),
        ("knn:3", ("knn", 3.0)),
        ("distance_band", ("distance_band", None)),
        ("distance_band:5.5", ("distance_band", 5.5)),
        ("  KNN:2 ", ("knn", 2.0)),
    ],
)
def test_parse_scheme(text, expect):
    assert spatial.parse_scheme(text) == expect


@pytest.mark.parametrize("bad", ["rook", "queen:2", ""])
def test_parse_scheme_rejects(bad):
    with pytest.raises(SchemaError):
        spatial.parse_scheme(bad)


def test_parse_scheme_domain_errors():
    with pytest.raises(DomainError):
        spatial.parse_scheme("knn:0")
    with pytest.raises(DomainError):
        spatial.parse_scheme("distance_band:-1")


# --- weights construction -------------------------------------------------


def test_queen_2x2_full_adjacency():
    # corner touch counts: every cell neighbors the other three
    w = spatial.build_weights(grid_areas(2, 2), "queen")
    for a in w.ids:
        assert len(w.neighbors[a]) == 3


def test_queen_path_degrees():
    w = spatial.build_weights(path3(), "queen", row_standardize=False)
    degs = {a: len(row) for a, row in w.neighbors.items()}
    assert degs == {"r000c000": 1, "r000c001": 2, "r000c002": 1}


def test_queen_symmetric_before_standardization():
    w = spatial.build_weights(grid_areas(3, 4), "queen", row_standardize=False)
    pairs = {(a, b) for a, row in w.neighbors.items() for b, _ in row}
    assert all((b, a) in pairs for a, b in pairs)
    assert all(a != b for a, b in pairs)  # no self-neighbors


def test_row_standardized_rows_sum_to_one():
    w = spatial.build_weights(grid_areas(3, 3), "queen")
    for a in w.ids:
        total = sum(wt for _, wt in w.neighbors[a])
        assert total == pytest.approx(1.0, abs=1e-12)
    assert w.s0() == pytest.approx(9.0)  # one unit per non-isolate row


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    pts = rng.uniform(0, 10, size=(10, 2))
    areas = AreaSet(
        [
            Area(
                area_id=f"p{i}",
                name=f"p{i}",
                geometry=Polygon(
                    [
                        (x - 0.01, y - 0.01),
                        (x + 0.01, y - 0.01),
                        (x + 0.01, y + 0.01),
                        (x - 0.01, y + 0.01),
                    ]
                ),
                centroid=(x, y),
            )
            for i, (x, y) in enumerate(pts)
        ]
    )
    k = 3
    w = spatial.build_weights(areas, f"knn:{k}", row_standardize=False)
    for i in range(10):
        dists = [
            (spatial.haversine_km(pts[i, 0], pts[i, 1], pts[j, 0], pts[j, 1]), j)
            for j in range(10)
            if j != i
        ]
        expect = {f"p{j}" for _, j in sorted(dists)[:k]}
        got = {b for b, _ in w.neighbors[f"p{i}"]}
        assert got == expect
        assert len(w.neighbors[f"p{i}"]) == k


def test_knn_k_must_be_below_n():
    with pytest.raises(DomainError):
        spatial.build_weights(grid_areas(2, 2), "knn:4")


def test_distance_band_isolate_recorded_with_warning():
    # two near squares and one far away; small band isolates the far one
    near = grid_areas(1, 2)
    far = Area(
        area_id="far",
        name="far",
        geometry=Polygon([(50, 0), (51, 0), (51, 1), (50, 1)]),
        centroid=(50.5, 0.5),
    )
    areas = AreaSet(list(near) + [far])
    with pytest.warns(UserWarning):
        w = spatial.build_weights(areas, "distance_band:200")
    assert w.isolates() == ["far"]
    assert set(w.nonisolate_ids()) == {"r000c000", "r000c001"}


def test_distance_band_default_leaves_no_isolates():
    areas = grid_areas(2, 3)
    w = spatial.build_weights(areas, "distance_band")
    assert w.isolates() == []


def test_min_nonisolating_distance_on_grid():
    # on a regular grid every nearest-neighbor gap is one cell
    areas = grid_areas(2, 2)
    d = spatial.min_nonisolating_distance(areas)
    gap = spatial.haversine_km(0.5, 0.5, 1.5, 0.5)
    assert d == pytest.approx(gap, rel=1e-9)


# --- Moran's I ------------------------------------------------------------


def test_morans_i_path_fixtures():
    w = spatial.build_weights(path3(), "queen")
    assert spatial.morans_i(path3_values([0.0, 1.0, 2.0]), w) == pytest.approx(
        0.0, abs=1e-12
    )
    assert spatial.morans_i(path3_values([1.0, 0.0, 1.0]), w) == pytest.approx(
        -1.0, abs=1e-12
    )


def test_morans_i_constant_values():
    w = spatial.build_weights(path3(), "queen")
    with pytest.raises(DegenerateInput):
        spatial.morans_i(path3_values([2.0, 2.0, 2.0]), w)


def test_morans_i_missing_value():
    w = spatial.build_weights(path3(), "queen")
    with pytest.raises(SchemaError):
        spatial.morans_i({"r000c000": 1.0}, w)


def test_morans_i_non_finite_value():
    w = spatial.build_weights(path3(), "queen")
    with pytest.raises(DomainError):
        spatial.morans_i(path3_values([0.0, np.nan, 1.0]), w)


def test_morans_i_excludes_isolates():
    near = grid_areas(1, 3)
    far = Area(
        area_id="far",
        name="far",
        geometry=Polygon([(60, 0), (61, 0), (61, 1), (60, 1)]),
        centroid=(60.5, 0.5),
    )
    areas = AreaSet(list(near) + [far])
    with pytest.warns(UserWarning):
        w = spatial.build_weights(areas, "distance_band:200")
    vals = {"r000c000": 1.0, "r000c001": 0.0, "r000c002": 1.0, "far": 123.0}
    # the isolate's wild value must not influence I: identical to the
    # 3-area path statistic
    w3 = spatial.build_weights(near, "distance_band:200")
    assert spatial.morans_i(vals, w) == pytest.approx(
        spatial.morans_i({k: vals[k] for k in near.ids}, w3), abs=1e-12
    )


def test_row_standardized_reduction_identity():
    # with row-standardized W, I = sum(z * Wz) / sum(z^2)
    areas = grid_areas(4, 4)
    w = spatial.build_weights(areas, "queen")
    rng = np.random.default_rng(1)
    vals = {a: float(v) for a, v in zip(areas.ids, rng.normal(size=16))}
    W = w.dense(areas.ids)
    z = np.array([vals[a] for a in areas.ids])
    z = z - z.mean()
    expect = float(z @ (W @ z) / (z @ z))
    assert spatial.morans_i(vals, w) == pytest.approx(expect, abs=1e-12)


@given(a=st.floats(-50, 50), b=st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_morans_i_affine_invariance(a, b):
    if abs(a) < 1e-6:
        a = 1.0
    areas = grid_areas(3, 3)
    w = spatial.build_weights(areas, "queen")
    rng = np.random.default_rng(99)
    base = {aid: float(v) for aid, v in zip(areas.ids, rng.normal(size=9))}
    moved = {aid: a * v + b for aid, v in base.items()}
    assert spatial.morans_i(moved, w) == pytest.approx(
        spatial.morans_i(base, w), abs=1e-10
    )


# --- permutation inference ------------------------------------------------


def test_permutation_test_deterministic():
    areas = grid_areas(4, 4)
    w = spatial.build_weights(areas, "queen")
    rng = np.random.default_rng(7)
    vals = {a: float(v) for a, v in zip(areas.ids, rng.normal(size=16))}
    r1 = spatial.permutation_test(vals, w, n_permutations=199, seed=11)
    r2 = spatial.permutation_test(vals, w, n_permutations=199, seed=11)
    assert (r1.I, r1.p_value) == (r2.I, r2.p_value)
    assert r1.n_permutations == 199
    assert 0.0 < r1.p_value <= 1.0


def test_permutation_test_zero_permutations_boundary():
    w = spatial.build_weights(path3(), "queen")
    r = spatial.permutation_test(path3_values([0.0, 1.0, 2.0]), w, n_permutations=0, seed=1)
    assert r.p_value == 1.0


def test_permutation_test_detects_planted_gradient():
    areas = grid_areas(8, 8)
    w = spatial.build_weights(areas, "queen")
    vals = {}
    for r in range(8):
        for c in range(8):
            vals[f"r{r:03d}c{c:03d}"] = float(r + c)
    res = spatial.permutation_test(vals, w, n_permutations=999, seed=5)
    assert res.I > 0.5
    assert res.p_value <= 0.01


def test_moran_result_records_scheme_and_seed():
    w = spatial.build_weights(path3(), "queen")
    r = spatial.permutation_test(path3_values([0.0, 1.0, 2.0]), w, n_permutations=9, seed=3)
    assert r.scheme == "queen"
    assert r.seed == 3
    assert r.alternative == "greater"


# --- scheme range ---------------------------------------------------------


def test_scheme_range_identical_schemes():
    areas = grid_areas(3, 3)
    w = spatial.build_weights(areas, "queen")
    rng = np.random.default_rng(0)
    vals = {a: float(v) for a, v in zip(areas.ids, rng.normal(size=9))}
    rng_i, per = spatial.scheme_range(vals, [w, w])
    assert rng_i == pytest.approx(0.0, abs=1e-15)
    assert set(per) == {"queen"}


def test_scheme_range_equals_recompute_oracle():
    areas = grid_areas(4, 5)
    rng = np.random.default_rng(8)
    vals = {a: float(v) for a, v in zip(areas.ids, rng.normal(size=20))}
    ws = [
        spatial.build_weights(areas, s)
        for s in ("queen", "knn:4", "distance_band")
    ]
    rng_i, per = spatial.scheme_range(vals, ws)
    alone = {w.scheme: spatial.morans_i(vals, w) for w in ws}
    assert per == pytest.approx(alone)
    assert rng_i == pytest.approx(max(alone.values()) - min(alone.values()), abs=1e-15)


def test_scheme_range_needs_two_schemes():
    areas = grid_areas(2, 2)
    w = spatial.build_weights(areas, "queen")
    vals = {a: float(i) for i, a in enumerate(areas.ids)}
    with pytest.raises(DomainError):
        spatial.scheme_range(vals, [w])


# --- correlation and histograms ------------------------------------------


def test_pearson_identity_and_exact_linearity():
    x = np.arange(10.0)
    r, _ = spatial.pearson(x, x)
    assert r == pytest.approx(1.0, abs=1e-12)
    r2, _ = spatial.pearson(x, -2.0 * x + 5.0)
    assert r2 == pytest.approx(-1.0, abs=1e-12)


def test_pearson_matches_two_pass_oracle_and_scipy():
    rng = np.random.default_rng(17)
    x = rng.normal(size=50)
    y = 0.4 * x + rng.normal(scale=0.7, size=50)
    r, p = spatial.pearson(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    r_naive = float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))
    assert r == pytest.approx(r_naive, abs=1e-12)
    r_sp, p_sp = scipy.stats.pearsonr(x, y)
    assert r == pytest.approx(r_sp, abs=1e-12)
    assert p == pytest.approx(p_sp, rel=1e-9)


def test_pearson_guards():
    with pytest.raises(DomainError):
        spatial.pearson([1.0, 2.0], [1.0, 2.0])  # too short
    with pytest.raises(DegenerateInput):
        spatial.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_histogram_bins():
    edges, hist = spatial.histogram_bins([0.0, 0.5, 1.0, 1.0], n_bins=4)
    assert len(edges) == 5
    assert sum(hist) == 4
    assert edges[0] == pytest.approx(0.0)
    assert edges[-1] == pytest.approx(1.0)


def test_histogram_bins_degenerate_width():
    edges, hist = spatial.histogram_bins([2.0, 2.0], n_bins=3)
    assert edges[0] < 2.0 < edges[-1]
    assert sum(hist) == 2


def test_histogram_bins_empty():
    with pytest.raises(DegenerateInput):
        spatial.histogram_bins([], n_bins=3)
