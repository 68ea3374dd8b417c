"""Golden bundle for the renderer tests.

The bundle is produced by driving the audit CLI as an external program,
the same way a user would; these tests never import the audit package.
"""

import csv
import json
import re
import subprocess

import pytest

SCENARIO = {
    "rows": 6,
    "cols": 6,
    "seed": 5,
    "noise_sigma": 0.2,
    "covariates": [
        {"name": "income", "group": "socioeconomic", "smoothing": 0.6},
        {"name": "age", "group": "demographic", "smoothing": 0.3},
        {"name": "towers", "group": "resource_accessibility", "smoothing": 0.0},
    ],
    "penetration": {
        "form": "logistic",
        "coefficients": {"socioeconomic:income": 1.2},
        "intercept": 0.0,
    },
}

CONFIG = {
    "paths": {
        "areas": "areas.geojson",
        "census": "census.csv",
        "covariates": "covariates.csv",
        "sources": ["counts_synthetic.csv"],
        "surveys": "surveys.csv",
    },
    "out": "out",
    "seed": 5,
    "permutations": 99,
    "schemes": ["queen", "knn:5"],
    "model": {
        "folds": 4,
        "grid": [
            {"learning_rate": 0.1, "max_depth": 2, "n_rounds": 30},
            {"learning_rate": 0.3, "max_depth": 3, "n_rounds": 30},
        ],
    },
    "explain": {"dependence_count": 2},
}


def run_audit(args, cwd):
    proc = subprocess.run(
        ["coverbias", *args], cwd=cwd, capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    return proc


@pytest.fixture(scope="session")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    (root / "scenario.json").write_text(json.dumps(SCENARIO), encoding="utf-8")
    run_audit(["synth", "--spec", "scenario.json", "--out", "."], cwd=root)
    with open(root / "surveys.csv", "w", encoding="utf-8") as fh:
        fh.write("name,respondents,reference_population\n")
        fh.write("survey_a,40,20000\n")
        fh.write("survey_b,900,20000\n")
    (root / "config.json").write_text(json.dumps(CONFIG), encoding="utf-8")
    run_audit(["run", "--config", "config.json"], cwd=root)
    return root


@pytest.fixture(scope="session")
def report_path(bundle):
    return bundle / "out" / "report.json"


@pytest.fixture(scope="session")
def report(report_path):
    with open(report_path, encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def area_ids(report):
    return [row["area_id"] for row in report["sources"][0]["bias"]]


def write_layout(path, ids):
    """Grid ids carry their own row/col; real layouts come from a
    cartogram tool."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "col", "row"])
        for area_id in ids:
            m = re.fullmatch(r"r(\d+)c(\d+)", area_id)
            writer.writerow([area_id, int(m.group(2)), int(m.group(1))])


@pytest.fixture(scope="session")
def hexes_path(bundle, area_ids):
    path = bundle / "hexes.csv"
    write_layout(path, area_ids)
    return path
