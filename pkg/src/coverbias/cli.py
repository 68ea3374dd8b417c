"""Command-line entry points for the bias-audit pipeline.

Four stages run per device-data source: measure per-area coverage and
bias against the census benchmark, compare sources on one national
scale, test the bias surface for spatial clustering, then model and
attribute the bias with boosted trees and exact attributions. `run`
executes all of it and writes a single machine-readable `report.json`
bundle (plus per-stage CSVs); the other subcommands expose the stages
individually so runs can be composed from intermediate files.

One global seed fans out to per-stage seeds through a hash, so any
stage can be reproduced in isolation and rerunning a config is
byte-identical apart from the report's `created_at` field.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import bias as bias_mod
from . import boost as boost_mod
from . import explain as explain_mod
from . import homeloc, ingest, spatial, synth
from .errors import CoverageBiasError, DomainError, EmptySelection, ParseError, SchemaError

SCHEMA_VERSION = 1
DEFAULT_SCHEMES = ("queen", "knn:8", "distance_band")
THREADS_ENV = "COVERBIAS_THREADS"


def derive_seed(seed: int, label: str) -> int:
    """Deterministic per-stage seed from the global seed and a label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def worker_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


@dataclasses.dataclass
class RunConfig:
    areas_path: str
    census_path: str
    covariates_path: str
    source_paths: list[str]
    out_dir: str
    surveys_path: str | None = None
    seed: int = 0
    schemes: list[str] = dataclasses.field(default_factory=lambda: list(DEFAULT_SCHEMES))
    permutations: int = 999
    allow_partial: bool = False
    home_rule: homeloc.HomeRule = dataclasses.field(default_factory=homeloc.HomeRule)
    n_rounds: int = 150
    folds: int = 10
    test_fraction: float = 0.8
    grid_override: list[dict] | None = None
    loess_frac: float = 0.75
    dependence_features: list[str] | None = None
    dependence_count: int = 3
    histogram_bins: int = 20

    def validate(self) -> None:
        """Referenced input files must exist before any compute starts."""
        paths = [self.areas_path, self.census_path, self.covariates_path, *self.source_paths]
        if self.surveys_path:
            paths.append(self.surveys_path)
        for p in paths:
            if not Path(p).is_file():
                raise SchemaError(f"configured input file does not exist: {p}")
        if not self.source_paths:
            raise SchemaError("config lists no device-data sources")
        if self.permutations < 1:
            raise DomainError("permutations must be >= 1")
        if not (0.0 < self.test_fraction < 1.0):
            raise DomainError("test_fraction must be in (0, 1)")
        if not self.schemes:
            raise SchemaError("config lists no weighting schemes")

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["home_rule"] = {
            "night_start": self.home_rule.night_start,
            "night_end": self.home_rule.night_end,
            "min_night_pings": self.home_rule.min_night_pings,
            "modal_share_threshold": self.home_rule.modal_share_threshold,
            "utc_offset_minutes": self.home_rule.utc_offset_minutes,
        }
        return doc


_CONFIG_KEYS = {
    "paths",
    "out",
    "seed",
    "schemes",
    "permutations",
    "allow_partial",
    "home_rule",
    "model",
    "explain",
}


def _home_rule_from_dict(doc: dict) -> homeloc.HomeRule:
    return homeloc.HomeRule(
        night_start=str(doc.get("night_start", "22:00")),
        night_end=str(doc.get("night_end", "06:00")),
        min_night_pings=int(doc.get("min_night_pings", 2)),
        modal_share_threshold=float(doc.get("modal_share_threshold", 0.5)),
        utc_offset_minutes=int(doc.get("utc_offset_minutes", 0)),
    )


def load_run_config(path) -> RunConfig:
    """Read a run config from TOML or JSON.

    Relative paths inside the file resolve against the file's own
    directory, so a bundle of config plus data files is relocatable.
    """
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    elif path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        raise SchemaError(f"config file must be .toml or .json, got {path.name!r}")
    if not isinstance(doc, dict):
        raise SchemaError("config file must contain a table at top level")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")

    base = path.parent

    def resolve(p) -> str:
        return str((base / p) if not Path(p).is_absolute() else Path(p))

    try:
        paths = doc["paths"]
        model = doc.get("model", {})
        expl = doc.get("explain", {})
        return RunConfig(
            areas_path=resolve(paths["areas"]),
            census_path=resolve(paths["census"]),
            covariates_path=resolve(paths["covariates"]),
            source_paths=[resolve(p) for p in paths["sources"]],
            surveys_path=resolve(paths["surveys"]) if "surveys" in paths else None,
            out_dir=resolve(doc.get("out", "out")),
            seed=int(doc.get("seed", 0)),
            schemes=[str(s) for s in doc.get("schemes", list(DEFAULT_SCHEMES))],
            permutations=int(doc.get("permutations", 999)),
            allow_partial=bool(doc.get("allow_partial", False)),
            home_rule=_home_rule_from_dict(doc.get("home_rule", {})),
            n_rounds=int(model.get("n_rounds", 150)),
            folds=int(model.get("folds", 10)),
            test_fraction=float(model.get("test_fraction", 0.8)),
            grid_override=model.get("grid"),
            loess_frac=float(expl.get("loess_frac", 0.75)),
            dependence_features=expl.get("features"),
            dependence_count=int(expl.get("dependence_count", 3)),
            histogram_bins=int(expl.get("histogram_bins", 20)),
        )
    except KeyError as exc:
        raise SchemaError(f"config is missing required key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"malformed config: {exc}") from None


def _source_id_from_path(path) -> str:
    stem = Path(path).stem
    for prefix in ("counts_", "bias_"):
        if stem.startswith(prefix):
            return stem[len(prefix) :]
    return stem


def _load_surveys(path) -> list[tuple[str, float, float]]:
    surveys = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["name", "respondents", "reference_population"]:
            raise SchemaError(
                f"survey file must start with 'name,respondents,reference_population', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", line_number=lineno)
            try:
                surveys.append((row[0], float(row[1]), float(row[2])))
            except ValueError:
                raise ParseError(f"bad number in {row!r}", line_number=lineno) from None
    return surveys


def _grid_for(config: RunConfig, boost_seed: int) -> list[boost_mod.BoostParams]:
    if config.grid_override:
        grid = []
        for gp in config.grid_override:
            kw = dict(gp)
            kw.setdefault("n_rounds", config.n_rounds)
            kw["seed"] = boost_seed
            try:
                grid.append(boost_mod.BoostParams(**kw))
            except TypeError as exc:
                raise SchemaError(f"bad grid entry {gp!r}: {exc}") from None
        return grid
    return boost_mod.default_grid(n_rounds=config.n_rounds, seed=boost_seed)


def _moran_doc(res: spatial.MoranResult) -> dict:
    return {
        "scheme": res.scheme,
        "I": res.I,
        "p_value": res.p_value,
        "n_permutations": res.n_permutations,
        "seed": res.seed,
        "alternative": res.alternative,
    }


def _write_shap_csv(shap: explain_mod.ShapMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", *shap.feature_names])
        for i, area_id in enumerate(shap.area_ids):
            writer.writerow([area_id, *[repr(float(v)) for v in shap.values[i]]])


def _dependence_targets(config: RunConfig, profile: explain_mod.ImportanceProfile) -> list[str]:
    if config.dependence_features:
        return list(config.dependence_features)
    return profile.feature_order()[: config.dependence_count]


def _analyze_source(
    config: RunConfig,
    source: ingest.CountTable,
    census: ingest.CountTable,
    covariates: ingest.CovariateTable,
    ids: list[str],
    weights: list[spatial.SpatialWeights],
    out_dir: Path,
    notes: list[str],
) -> tuple[dict, bias_mod.CoverageSummary]:
    sid = source.source_id
    seed = config.seed

    bias_table = bias_mod.coverage_bias(source, census, area_ids=ids)
    summary = bias_mod.national_summary(source, census, area_ids=ids)
    bias_mod.write_bias_table(bias_table, out_dir / f"bias_{sid}.csv")

    bias_values = {a: bias_table.rows[a].bias for a in ids}
    moran_docs = [
        _moran_doc(
            spatial.permutation_test(
                bias_values,
                w,
                n_permutations=config.permutations,
                seed=derive_seed(seed, f"moran:{sid}:{w.scheme}"),
            )
        )
        for w in weights
    ]
    if len(weights) >= 2:
        i_range, per_scheme = spatial.scheme_range(bias_values, weights)
        range_doc = {"range": i_range, "per_scheme": per_scheme}
    else:
        range_doc = None

    edges, counts = spatial.histogram_bins(list(bias_values.values()), config.histogram_bins)
    population = [census.rows[a] for a in ids]
    bias_vec = [bias_values[a] for a in ids]
    r, p = spatial.pearson(population, bias_vec)

    dataset = boost_mod.make_dataset(bias_table, covariates, area_ids=ids)
    train, test = boost_mod.split_train_test(
        dataset, fraction=config.test_fraction, seed=derive_seed(seed, f"split:{sid}")
    )
    grid = _grid_for(config, derive_seed(seed, f"boost:{sid}"))
    best, fold_scores = boost_mod.grid_search_cv(
        train, grid, folds=config.folds, seed=derive_seed(seed, f"cv:{sid}")
    )
    ensemble = boost_mod.fit(train, best)
    eval_result = boost_mod.evaluate(ensemble, test)
    fit_report = boost_mod.FitReport(
        best_params=best,
        fold_scores=fold_scores,
        train_rmse=ensemble.train_rmse,
        test_rmse=eval_result.rmse,
        observed=eval_result.observed,
        predicted=eval_result.predicted,
    )
    (out_dir / f"model_{sid}.json").write_text(boost_mod.ensemble_to_json(ensemble), encoding="utf-8")

    shap = explain_mod.tree_shap(ensemble, dataset, n_threads=worker_threads())
    _write_shap_csv(shap, out_dir / f"shap_{sid}.csv")
    profile = explain_mod.importance_profile(shap)
    beeswarm = explain_mod.beeswarm_export(shap, covariates)

    target = [bias_values[a] for a in shap.area_ids]
    dependence = []
    for feature in _dependence_targets(config, profile):
        try:
            dep = explain_mod.dependence_export(
                shap, covariates, feature, loess_frac=config.loess_frac, target=target
            )
        except CoverageBiasError as exc:
            if config.dependence_features:
                raise
            notes.append(f"{sid}: skipped dependence curve for {feature!r}: {exc}")
            continue
        dependence.append(dep.to_dict())

    doc = {
        "source_id": sid,
        "reference_period": source.reference_period,
        "summary": {
            "national_coverage_per_1000": summary.national_coverage_per_1000,
            "national_bias": summary.national_bias,
            "n_observations": summary.n_observations,
        },
        "bias": [
            {
                "area_id": a,
                "coverage": bias_table.rows[a].coverage,
                "bias": bias_table.rows[a].bias,
            }
            for a in ids
        ],
        "exceedance_area_ids": bias_table.exceedance_ids(),
        "histogram": {"edges": edges, "counts": counts},
        "population_scatter": [
            {"area_id": a, "population": census.rows[a], "bias": bias_values[a]} for a in ids
        ],
        "pearson": {"r": r, "p_value": p},
        "moran": moran_docs,
        "moran_range": range_doc,
        "model": fit_report.to_dict(),
        "shap": {
            "expected_value": shap.expected_value,
            "feature_names": shap.feature_names,
        },
        "importance": profile.to_records(),
        "importance_degenerate": profile.degenerate,
        "beeswarm": beeswarm,
        "dependence": dependence,
    }
    return doc, summary


def run_pipeline(config: RunConfig) -> Path:
    """Execute measure, compare, spatial and explain for every source.

    Writes `report.json` plus per-stage CSVs into the output directory
    and returns the report path. On a stage error, whatever was already
    written stays on disk next to a FAILED marker file.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failed_marker = out_dir / "FAILED"
    if failed_marker.exists():
        failed_marker.unlink()

    try:
        areas = ingest.load_area_geometries(config.areas_path)
        census = ingest.load_count_table(config.census_path, source_id="census")
        covariates = ingest.load_covariates(config.covariates_path)
        sources = [
            ingest.load_count_table(p, source_id=_source_id_from_path(p))
            for p in config.source_paths
        ]
        surveys = _load_surveys(config.surveys_path) if config.surveys_path else []

        alignment = ingest.validate_alignment(areas, [census, covariates, *sources])
        if not alignment.ok and not config.allow_partial:
            raise DomainError(
                f"area ids disagree across inputs ({len(alignment.missing)} missing, "
                f"{len(alignment.extra)} extra); rerun with --allow-partial to "
                "restrict analysis to the aligned subset"
            )
        ids = alignment.aligned
        if not ids:
            raise EmptySelection("no areas present in every input")
        areas_used = areas if len(ids) == len(areas.ids) else ingest.AreaSet([areas[a] for a in ids])

        weights = [spatial.build_weights(areas_used, s) for s in config.schemes]

        notes: list[str] = []
        source_docs = []
        summaries = []
        for source in sources:
            doc, summary = _analyze_source(
                config, source, census, covariates, ids, weights, out_dir, notes
            )
            source_docs.append(doc)
            summaries.append(summary)

        comparison = bias_mod.survey_comparison(summaries, surveys)
        report = {
            "schema_version": SCHEMA_VERSION,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "seed": config.seed,
            "config": config.to_dict(),
            "alignment": alignment.to_dict(),
            "schemes": [w.scheme for w in weights],
            "sources": source_docs,
            "comparison": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "coverage_per_1000": c.coverage_per_1000,
                    "bias": c.bias,
                    "n_observations": c.n_observations,
                }
                for c in comparison
            ],
            "notes": notes,
        }
    except CoverageBiasError as exc:
        failed_marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise

    report_path = out_dir / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report_path


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _night_window(value: str) -> tuple[str, str]:
    start, sep, end = value.partition("-")
    if not sep or not start or not end:
        raise argparse.ArgumentTypeError(f"night window must look like HH:MM-HH:MM, got {value!r}")
    return start, end


def cmd_ingest_check(args) -> int:
    areas = ingest.load_area_geometries(args.areas)
    tables = [ingest.load_count_table(args.census, source_id="census")]
    if args.covariates:
        tables.append(ingest.load_covariates(args.covariates))
    for p in args.source or []:
        tables.append(ingest.load_count_table(p, source_id=_source_id_from_path(p)))
    report = ingest.validate_alignment(areas, tables)
    _print_json(report.to_dict())
    if not report.ok:
        print("alignment check failed", file=sys.stderr)
        return 3
    return 0


def cmd_homes(args) -> int:
    areas = ingest.load_area_geometries(args.areas)
    rule = homeloc.HomeRule(
        night_start=args.night_window[0] if args.night_window else "22:00",
        night_end=args.night_window[1] if args.night_window else "06:00",
        min_night_pings=args.min_night_pings,
        modal_share_threshold=args.modal_share,
        utc_offset_minutes=args.utc_offset,
    )
    if args.pings:
        pings = ingest.load_pings(args.pings, reference_period=args.period or None)
        stats: dict = {}
        homes = homeloc.detect_homes(pings, areas, rule, stats=stats)
        table = homeloc.aggregate_homes(
            homes, source_id=args.source_id, areas=areas, reference_period=args.period
        )
        summary = {
            "devices_seen": sum(1 for _ in pings.by_device()),
            "devices_homed": len(homes),
            "stats": stats,
        }
    else:
        tiles = homeloc.load_tile_counts(args.tiles)
        drop_log: list[str] = []
        table = homeloc.window_average_counts(
            tiles,
            args.window,
            areas,
            source_id=args.source_id,
            reference_period=args.period,
            drop_log=drop_log,
        )
        summary = {"tiles_dropped": len(drop_log), "dropped_quadkeys": drop_log}
    ingest.write_count_table(table, args.out)
    summary["total"] = table.total()
    summary["out"] = str(args.out)
    _print_json(summary)
    return 0


def cmd_coverage(args) -> int:
    census = ingest.load_count_table(args.census, source_id="census")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    docs = []
    for p in args.source:
        source = ingest.load_count_table(p, source_id=_source_id_from_path(p))
        table = bias_mod.coverage_bias(source, census)
        summary = bias_mod.national_summary(source, census)
        bias_mod.write_bias_table(table, out_dir / f"bias_{source.source_id}.csv")
        summaries.append(summary)
        docs.append(
            {
                "source_id": source.source_id,
                "national_coverage_per_1000": summary.national_coverage_per_1000,
                "national_bias": summary.national_bias,
                "n_observations": summary.n_observations,
                "exceedance_area_ids": table.exceedance_ids(),
                "bias_csv": str(out_dir / f"bias_{source.source_id}.csv"),
            }
        )
    surveys = _load_surveys(args.surveys) if args.surveys else []
    comparison = bias_mod.survey_comparison(summaries, surveys)
    _print_json(
        {
            "sources": docs,
            "comparison": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "coverage_per_1000": c.coverage_per_1000,
                    "bias": c.bias,
                    "n_observations": c.n_observations,
                }
                for c in comparison
            ],
        }
    )
    return 0


def cmd_spatial(args) -> int:
    areas = ingest.load_area_geometries(args.areas)
    table = bias_mod.load_bias_table(args.values, source_id=_source_id_from_path(args.values))
    if args.column == "bias":
        values = {a: row.bias for a, row in table.rows.items()}
    else:
        values = {a: row.coverage for a, row in table.rows.items()}
    known = [a for a in areas.ids if a in values]
    if len(known) < len(areas.ids):
        areas = ingest.AreaSet([areas[a] for a in known])
    schemes = [s for s in args.schemes.split(",") if s]
    weights = [spatial.build_weights(areas, s) for s in schemes]
    results = [
        _moran_doc(
            spatial.permutation_test(
                values,
                w,
                n_permutations=args.permutations,
                seed=derive_seed(args.seed, f"moran:{table.source_id}:{w.scheme}"),
            )
        )
        for w in weights
    ]
    doc: dict = {"column": args.column, "results": results}
    if len(weights) >= 2:
        i_range, per_scheme = spatial.scheme_range(values, weights)
        doc["range"] = i_range
        doc["per_scheme"] = per_scheme
    _print_json(doc)
    return 0


def cmd_model(args) -> int:
    table = bias_mod.load_bias_table(args.bias, source_id=_source_id_from_path(args.bias))
    covariates = ingest.load_covariates(args.covariates)
    dataset = boost_mod.make_dataset(table, covariates)
    train, test = boost_mod.split_train_test(
        dataset, fraction=args.test_fraction, seed=derive_seed(args.seed, f"split:{table.source_id}")
    )
    boost_seed = derive_seed(args.seed, f"boost:{table.source_id}")
    if args.grid:
        with open(args.grid, encoding="utf-8") as fh:
            entries = json.load(fh)
        if not isinstance(entries, list):
            raise SchemaError("grid file must hold a JSON array of parameter tables")
        grid = []
        for gp in entries:
            kw = dict(gp)
            kw.setdefault("n_rounds", args.rounds)
            kw["seed"] = boost_seed
            grid.append(boost_mod.BoostParams(**kw))
    else:
        grid = boost_mod.default_grid(n_rounds=args.rounds, seed=boost_seed)
    best, fold_scores = boost_mod.grid_search_cv(
        train, grid, folds=args.folds, seed=derive_seed(args.seed, f"cv:{table.source_id}")
    )
    ensemble = boost_mod.fit(train, best)
    eval_result = boost_mod.evaluate(ensemble, test)
    Path(args.out).write_text(boost_mod.ensemble_to_json(ensemble), encoding="utf-8")
    report = boost_mod.FitReport(
        best_params=best,
        fold_scores=fold_scores,
        train_rmse=ensemble.train_rmse,
        test_rmse=eval_result.rmse,
        observed=eval_result.observed,
        predicted=eval_result.predicted,
    )
    _print_json({"model": str(args.out), **report.to_dict()})
    return 0


def cmd_explain(args) -> int:
    ensemble = boost_mod.ensemble_from_json(Path(args.model).read_text(encoding="utf-8"))
    covariates = ingest.load_covariates(args.covariates)
    if args.bias:
        table = bias_mod.load_bias_table(args.bias, source_id=_source_id_from_path(args.bias))
        ids = [a for a in table.rows if a in covariates.rows]
        target = [table.rows[a].bias for a in ids]
    else:
        ids = list(covariates.rows)
        target = None
    dataset = boost_mod.Dataset(
        area_ids=ids,
        X=covariates.matrix(ids),
        y=np.zeros(len(ids)),
        feature_names=covariates.qualified_names,
    )
    shap = explain_mod.tree_shap(ensemble, dataset, n_threads=worker_threads())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_shap_csv(shap, out_dir / "shap.csv")
    profile = explain_mod.importance_profile(shap)
    beeswarm = explain_mod.beeswarm_export(shap, covariates)
    features = (
        [f for f in args.features.split(",") if f]
        if args.features
        else profile.feature_order()[: args.dependence_count]
    )
    dependence = []
    for feature in features:
        dep = explain_mod.dependence_export(
            shap, covariates, feature, loess_frac=args.loess_frac, target=target
        )
        dependence.append(dep.to_dict())
    (out_dir / "importance.json").write_text(
        json.dumps(profile.to_records(), indent=2, sort_keys=True), encoding="utf-8"
    )
    (out_dir / "beeswarm.json").write_text(
        json.dumps(beeswarm, indent=2, sort_keys=True), encoding="utf-8"
    )
    (out_dir / "dependence.json").write_text(
        json.dumps(dependence, indent=2, sort_keys=True), encoding="utf-8"
    )
    _print_json(
        {
            "expected_value": shap.expected_value,
            "importance": profile.to_records(),
            "degenerate": profile.degenerate,
            "out": str(out_dir),
        }
    )
    return 0


def cmd_synth(args) -> int:
    spec = synth.load_scenario(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    world = synth.generate_world(spec)
    areas, census, covariates = world
    counts = synth.generate_counts(world, spec)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ingest.write_area_geometries(areas, out_dir / "areas.geojson")
    ingest.write_count_table(census, out_dir / "census.csv")
    ingest.write_covariates(covariates, out_dir / "covariates.csv")
    counts_path = out_dir / f"counts_{spec.source_id}.csv"
    ingest.write_count_table(counts, counts_path)

    config = {
        "paths": {
            "areas": "areas.geojson",
            "census": "census.csv",
            "covariates": "covariates.csv",
            "sources": [counts_path.name],
        },
        "out": "out",
        "seed": spec.seed,
    }
    (out_dir / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True), encoding="utf-8"
    )
    _print_json(
        {
            "areas": len(areas.ids),
            "census_total": census.total(),
            "source_total": counts.total(),
            "out": str(out_dir),
            "config": str(out_dir / "config.json"),
        }
    )
    return 0


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.out_dir = args.out
    if args.allow_partial:
        config.allow_partial = True
    if args.schemes:
        config.schemes = [s for s in args.schemes.split(",") if s]
    if args.permutations is not None:
        config.permutations = args.permutations
    if args.night_window:
        start, end = args.night_window
        config.home_rule = dataclasses.replace(
            config.home_rule, night_start=start, night_end=end
        )
    report_path = run_pipeline(config)
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)
    _print_json(
        {
            "report": str(report_path),
            "sources": [
                {
                    "source_id": s["source_id"],
                    "national_bias": s["summary"]["national_bias"],
                    "moran": s["moran"],
                    "top_feature": s["importance"][0]["feature"] if s["importance"] else None,
                }
                for s in report["sources"]
            ],
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coverbias",
        description="Measure, compare, map and explain population coverage bias "
        "in device-derived population counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", help="validate inputs and report id alignment")
    p.add_argument("--areas", required=True)
    p.add_argument("--census", required=True)
    p.add_argument("--covariates")
    p.add_argument("--source", action="append")
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("homes", help="assign devices to home areas and count them")
    p.add_argument("--areas", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pings", help="GPS ping records (CSV or NDJSON)")
    group.add_argument("--tiles", help="tile count records (CSV)")
    p.add_argument("--window", default="W1", help="tile window label (W1, W2, W3)")
    p.add_argument("--night-window", type=_night_window, metavar="HH:MM-HH:MM")
    p.add_argument("--min-night-pings", type=int, default=2)
    p.add_argument("--modal-share", type=float, default=0.5)
    p.add_argument("--utc-offset", type=int, default=0)
    p.add_argument("--source-id", default="devices")
    p.add_argument("--period", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_homes)

    p = sub.add_parser("coverage", help="per-area coverage/bias against the census")
    p.add_argument("--census", required=True)
    p.add_argument("--source", action="append", required=True)
    p.add_argument("--surveys")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("spatial", help="Moran's I of a bias surface under one or more schemes")
    p.add_argument("--areas", required=True)
    p.add_argument("--values", required=True, help="bias CSV from the coverage stage")
    p.add_argument("--column", choices=["bias", "coverage"], default="bias")
    p.add_argument("--schemes", default=",".join(DEFAULT_SCHEMES))
    p.add_argument("--permutations", type=int, default=999)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_spatial)

    p = sub.add_parser("model", help="tune and fit the boosted-tree bias model")
    p.add_argument("--bias", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--grid", help="JSON array of parameter tables")
    p.add_argument("--rounds", type=int, default=150)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--test-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="where to write the fitted model JSON")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("explain", help="attributions and figure data for a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--bias", help="bias CSV; aligns rows and adds outcome curves")
    p.add_argument("--features", help="comma-separated features for dependence curves")
    p.add_argument("--dependence-count", type=int, default=3)
    p.add_argument("--loess-frac", type=float, default=0.75)
    p.add_argument("--out", default="explain_out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="generate a synthetic world from a scenario file")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--schemes")
    p.add_argument("--permutations", type=int)
    p.add_argument("--night-window", type=_night_window, metavar="HH:MM-HH:MM")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CoverageBiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
