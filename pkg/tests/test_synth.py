"""Synthetic worlds with planted drivers, plus the shipped oracles."""

import json

import numpy as np
import pytest

from coverbias import bias, boost, ingest, spatial, synth
from coverbias.boost import BoostParams, TreeEnsemble, TreeNode
from coverbias.errors import DegenerateInput, DomainError, SchemaError
from coverbias.synth import CovariateGen, PenetrationSpec, ScenarioSpec

from _builders import grid_areas, path3


def scenario(rows=4, cols=4, form="linear", intercept=0.1, coefficients=None, **kw):
    gens = kw.pop(
        "covariates",
        (CovariateGen(name="income", group="socioeconomic", smoothing=0.5),),
    )
    pen = PenetrationSpec(
        form=form, coefficients=coefficients or {}, intercept=intercept
    )
    return ScenarioSpec(rows=rows, cols=cols, covariates=gens, penetration=pen, **kw)


# --- world generation -----------------------------------------------------


def test_world_grid_matches_reference_layout():
    areas, census, cov = synth.generate_world(scenario(rows=2, cols=2))
    assert areas.ids == ["r000c000", "r000c001", "r001c000", "r001c001"]
    w = spatial.build_weights(areas, "queen")
    assert all(len(w.neighbors[a]) == 3 for a in areas.ids)
    assert set(census.rows) == set(areas.ids)
    assert all(v >= 1.0 for v in census.rows.values())
    assert cov.qualified_names == ["socioeconomic:income"]


def test_world_deterministic_per_seed():
    spec = scenario(seed=123)
    w1 = synth.generate_world(spec)
    w2 = synth.generate_world(spec)
    assert w1[1].rows == w2[1].rows
    for a in w1[0].ids:
        np.testing.assert_array_equal(w1[2].rows[a], w2[2].rows[a])
    w3 = synth.generate_world(scenario(seed=124))
    assert w3[1].rows != w1[1].rows


def test_unsmoothed_covariate_is_null_for_moran():
    # smoothing 0: i.i.d. surface; average I over seeds near -1/(n-1)
    areas = grid_areas(6, 6)
    w = spatial.build_weights(areas, "queen")
    stats = []
    for seed in range(40):
        spec = scenario(
            rows=6,
            cols=6,
            covariates=(CovariateGen(name="x", group="geographic", smoothing=0.0),),
            seed=seed,
        )
        _, _, cov = synth.generate_world(spec)
        vals = {a: float(cov.rows[a][0]) for a in areas.ids}
        stats.append(spatial.morans_i(vals, w))
    null = -1.0 / (36 - 1)
    assert abs(np.mean(stats) - null) < 0.05


def test_smoothing_raises_spatial_autocorrelation():
    areas = grid_areas(8, 8)
    w = spatial.build_weights(areas, "queen")

    def mean_i(smoothing):
        out = []
        for seed in range(10):
            spec = scenario(
                rows=8,
                cols=8,
                covariates=(
                    CovariateGen(name="x", group="geographic", smoothing=smoothing),
                ),
                seed=seed,
            )
            _, _, cov = synth.generate_world(spec)
            vals = {a: float(cov.rows[a][0]) for a in areas.ids}
            out.append(spatial.morans_i(vals, w))
        return float(np.mean(out))

    assert mean_i(0.9) > mean_i(0.0) + 0.2


def test_covariate_distributions():
    gens = (
        CovariateGen(name="n", group="demographic", dist="normal"),
        CovariateGen(name="u", group="demographic", dist="uniform"),
        CovariateGen(name="ln", group="demographic", dist="lognormal"),
    )
    spec = scenario(rows=12, cols=12, covariates=gens)
    _, _, cov = synth.generate_world(spec)
    mat = cov.matrix(list(cov.rows))
    assert np.all(mat[:, 2] > 0)  # lognormal support
    assert mat[:, 1].min() >= 0.0 and mat[:, 1].max() <= 1.0


def test_covariate_gen_validation():
    with pytest.raises(SchemaError):
        CovariateGen(name="x", group="socioeconomic", dist="cauchy")
    with pytest.raises(DomainError):
        CovariateGen(name="x", group="socioeconomic", scale=0.0)
    with pytest.raises(DomainError):
        CovariateGen(name="x", group="socioeconomic", smoothing=1.5)
    with pytest.raises(SchemaError):
        CovariateGen(name="x", group="zodiac")


def test_scenario_rejects_undeclared_coefficient():
    with pytest.raises(SchemaError):
        scenario(coefficients={"socioeconomic:missing": 1.0})


# --- count generation -----------------------------------------------------


def test_constant_penetration_coverage_identity():
    # penetration 0.1 with no noise: c = 10 and e = 90 in every area
    spec = scenario(form="linear", intercept=0.1, noise_sigma=0.0)
    world = synth.generate_world(spec)
    counts = synth.generate_counts(world, spec)
    table = bias.coverage_bias(counts, world[1])
    for row in table.rows.values():
        assert row.coverage == pytest.approx(10.0, rel=1e-12)
        assert row.bias == pytest.approx(90.0, rel=1e-12)


def test_full_penetration_zero_bias():
    spec = scenario(form="linear", intercept=1.0, noise_sigma=0.0)
    world = synth.generate_world(spec)
    counts = synth.generate_counts(world, spec)
    table = bias.coverage_bias(counts, world[1])
    assert all(abs(r.bias) < 1e-9 for r in table.rows.values())


def test_penetration_out_of_range_rejected():
    spec = scenario(form="linear", intercept=2.0)  # > 1.5 everywhere
    world = synth.generate_world(spec)
    with pytest.raises(DomainError):
        synth.generate_counts(world, spec)
    neg = scenario(form="linear", intercept=-0.5)
    with pytest.raises(DomainError):
        synth.generate_counts(synth.generate_world(neg), neg)


def test_multi_account_exceedance_supported():
    spec = scenario(form="linear", intercept=1.2, noise_sigma=0.0)
    world = synth.generate_world(spec)
    counts = synth.generate_counts(world, spec)
    table = bias.coverage_bias(counts, world[1])
    assert len(table.exceedance_ids()) == len(table.rows)
    assert all(r.bias < 0 for r in table.rows.values())


def test_penetration_forms():
    score = np.array([-5.0, 0.0, 5.0])
    logistic = PenetrationSpec(form="logistic").evaluate(score)
    assert logistic[0] < 0.06 and logistic[2] > 0.94
    assert logistic[1] == pytest.approx(0.5, abs=0.01)
    u = PenetrationSpec(form="u_shape").evaluate(np.array([-2.0, 0.0, 2.0]))
    assert u[0] == u[2] == pytest.approx(0.95)
    assert u[1] == pytest.approx(0.05)
    step = PenetrationSpec(form="threshold").evaluate(np.array([-0.1, 0.1]))
    np.testing.assert_allclose(step, [0.05, 0.95])


def test_small_count_drop_never_raises_national_coverage():
    for seed in range(8):
        kept = scenario(
            rows=5,
            cols=5,
            form="logistic",
            coefficients={"socioeconomic:income": 1.0},
            noise_sigma=0.5,
            seed=seed,
            census_log_mean=4.0,  # small populations so drops actually occur
            census_log_sigma=1.0,
        )
        import dataclasses

        dropped = dataclasses.replace(kept, small_count_drop=True)
        world = synth.generate_world(kept)
        full = synth.generate_counts(world, kept)
        trimmed = synth.generate_counts(world, dropped)
        assert set(trimmed.rows) == set(full.rows)  # rows kept, zeroed
        assert all(v == 0.0 or v >= 10.0 for v in trimmed.rows.values())
        nat_full = bias.national_summary(full, world[1])
        nat_trim = bias.national_summary(trimmed, world[1])
        assert (
            nat_trim.national_coverage_per_1000
            <= nat_full.national_coverage_per_1000 + 1e-12
        )


def test_counts_deterministic_and_noise_seeded():
    spec = scenario(noise_sigma=0.3, seed=9)
    world = synth.generate_world(spec)
    c1 = synth.generate_counts(world, spec)
    c2 = synth.generate_counts(world, spec)
    assert c1.rows == c2.rows


# --- shipped oracles ------------------------------------------------------


def test_bruteforce_constant_ensemble_zero():
    ens = TreeEnsemble(
        trees=[],
        base_prediction=4.0,
        params=BoostParams(),
        feature_names=["f0", "f1"],
        train_rmse=[],
    )
    np.testing.assert_array_equal(
        synth.shapley_bruteforce(ens, np.array([1.0, 2.0])), [0.0, 0.0]
    )


def test_bruteforce_stump_closed_form():
    node = TreeNode(
        cover=10.0,
        feature=0,
        threshold=0.0,
        left=TreeNode(cover=4.0, weight=-1.0),
        right=TreeNode(cover=6.0, weight=3.0),
    )
    ens = TreeEnsemble(
        trees=[node],
        base_prediction=0.0,
        params=BoostParams(learning_rate=1.0),
        feature_names=["f0", "f1"],
        train_rmse=[],
    )
    phi = synth.shapley_bruteforce(ens, np.array([1.0, 0.0]))
    assert phi[0] == pytest.approx(3.0 - 1.4, abs=1e-12)  # f(x) - E[f]
    assert phi[1] == 0.0


def test_bruteforce_feature_cap():
    rng = np.random.default_rng(0)
    ens = boost.fit(
        boost.Dataset(
            area_ids=[f"a{i}" for i in range(20)],
            X=rng.normal(size=(20, 13)),
            y=rng.normal(size=20),
            feature_names=[f"f{i}" for i in range(13)],
        ),
        BoostParams(n_rounds=1),
    )
    with pytest.raises(DomainError):
        synth.shapley_bruteforce(ens, rng.normal(size=13))


def test_morans_naive_matches_fixtures():
    w = spatial.build_weights(path3(), "queen")
    vals = dict(zip(["r000c000", "r000c001", "r000c002"], [0.0, 1.0, 2.0]))
    assert synth.morans_naive(vals, w) == pytest.approx(0.0, abs=1e-12)
    vals2 = dict(zip(["r000c000", "r000c001", "r000c002"], [1.0, 0.0, 1.0]))
    assert synth.morans_naive(vals2, w) == pytest.approx(-1.0, abs=1e-12)


def test_morans_naive_error_parity():
    w = spatial.build_weights(path3(), "queen")
    vals = dict(zip(["r000c000", "r000c001", "r000c002"], [3.0, 3.0, 3.0]))
    with pytest.raises(DegenerateInput):
        synth.morans_naive(vals, w)
    with pytest.raises(DegenerateInput):
        spatial.morans_i(vals, w)


def test_morans_naive_agrees_with_vectorized():
    # the bulk 100-surface sweep is an acceptance criterion; a smaller
    # cross-check here keeps the unit suite fast
    areas = grid_areas(5, 5)
    for scheme in ("queen", "knn:4", "distance_band"):
        w = spatial.build_weights(areas, scheme)
        rng = np.random.default_rng(77)
        for _ in range(10):
            vals = {a: float(v) for a, v in zip(areas.ids, rng.normal(size=25))}
            assert synth.morans_naive(vals, w) == pytest.approx(
                spatial.morans_i(vals, w), abs=1e-12
            )


# --- scenario round-trips -------------------------------------------------


def full_scenario_doc():
    return {
        "rows": 3,
        "cols": 4,
        "noise_sigma": 0.2,
        "seed": 42,
        "census": {"log_mean": 7.0, "log_sigma": 0.4},
        "covariates": [
            {
                "name": "income",
                "group": "socioeconomic",
                "dist": "normal",
                "loc": 0.0,
                "scale": 1.0,
                "smoothing": 0.5,
            }
        ],
        "penetration": {
            "form": "logistic",
            "coefficients": {"socioeconomic:income": 0.8},
            "intercept": 0.0,
            "low": 0.1,
            "high": 0.9,
        },
        "small_count_drop": False,
        "source_id": "toy",
        "reference_period": "2021-01-01/2021-12-31",
    }


def test_scenario_dict_round_trip():
    spec = synth.scenario_from_dict(full_scenario_doc())
    assert synth.scenario_to_dict(spec) == full_scenario_doc()


def test_scenario_json_and_toml_loaders(tmp_path):
    doc = full_scenario_doc()
    jpath = tmp_path / "scenario.json"
    jpath.write_text(json.dumps(doc), encoding="utf-8")
    from_json = synth.load_scenario(jpath)

    toml_text = """
rows = 3
cols = 4
noise_sigma = 0.2
seed = 42
source_id = "toy"
reference_period = "2021-01-01/2021-12-31"
small_count_drop = false

[census]
log_mean = 7.0
log_sigma = 0.4

[[covariates]]
name = "income"
group = "socioeconomic"
dist = "normal"
loc = 0.0
scale = 1.0
smoothing = 0.5

[penetration]
form = "logistic"
intercept = 0.0
low = 0.1
high = 0.9

[penetration.coefficients]
"socioeconomic:income" = 0.8
"""
    tpath = tmp_path / "scenario.toml"
    tpath.write_text(toml_text, encoding="utf-8")
    from_toml = synth.load_scenario(tpath)
    assert from_json == from_toml


def test_scenario_unknown_keys_rejected(tmp_path):
    doc = full_scenario_doc()
    doc["surprise"] = 1
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(SchemaError):
        synth.load_scenario(path)


def test_scenario_requires_known_extension(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("rows: 2", encoding="utf-8")
    with pytest.raises(SchemaError):
        synth.load_scenario(path)


def test_world_round_trips_through_ingest_formats(tmp_path):
    spec = scenario(rows=3, cols=3, seed=2)
    areas, census, cov = synth.generate_world(spec)
    counts = synth.generate_counts(spec=spec, world=(areas, census, cov))

    ingest.write_area_geometries(areas, tmp_path / "areas.geojson")
    ingest.write_count_table(census, tmp_path / "census.csv")
    ingest.write_covariates(cov, tmp_path / "cov.csv")
    ingest.write_count_table(counts, tmp_path / "counts_synthetic.csv")

    areas2 = ingest.load_area_geometries(tmp_path / "areas.geojson")
    census2 = ingest.load_count_table(tmp_path / "census.csv", source_id="census")
    cov2 = ingest.load_covariates(tmp_path / "cov.csv")
    counts2 = ingest.load_count_table(tmp_path / "counts_synthetic.csv", source_id="synthetic")

    assert areas2.ids == areas.ids
    assert census2.rows == census.rows
    assert counts2.rows == counts.rows
    assert cov2.qualified_names == cov.qualified_names
    report = ingest.validate_alignment(areas2, [census2, cov2, counts2])
    assert report.ok
