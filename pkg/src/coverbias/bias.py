"""Coverage and bias-size computation against the census benchmark.

Coverage is the percentage of an area's benchmark population captured by
a source; bias size is its complement (100 - coverage). Multi-account
use can push coverage above 100, in which case bias goes negative and
the row is flagged rather than clamped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .errors import DegenerateDenominator, EmptySelection, SchemaError
from .ingest import CountTable


@dataclass(frozen=True)
class BiasRow:
    coverage: float  # percent of benchmark population captured
    bias: float  # 100 - coverage, exactly


@dataclass(frozen=True)
class BiasTable:
    source_id: str
    rows: dict[str, BiasRow]

    def exceedance_ids(self) -> list[str]:
        """Areas where coverage exceeds 100 (negative bias)."""
        return [a for a, r in self.rows.items() if r.coverage > 100.0]

    def values(self, area_ids: list[str] | None = None) -> list[float]:
        ids = area_ids if area_ids is not None else list(self.rows)
        return [self.rows[a].bias for a in ids]


@dataclass(frozen=True)
class CoverageSummary:
    source_id: str
    national_coverage_per_1000: float
    national_bias: float  # percent
    n_observations: float


def _aligned_ids(source: CountTable, census: CountTable, area_ids=None) -> list[str]:
    if area_ids is not None:
        ids = [a for a in area_ids if a in source.rows and a in census.rows]
    else:
        ids = [a for a in census.rows if a in source.rows]
    return ids


def coverage_bias(
    source: CountTable, census: CountTable, area_ids: list[str] | None = None
) -> BiasTable:
    """Per-area coverage and bias size for one source.

    ``area_ids`` restricts computation to an aligned subset (the
    `--allow-partial` path); by default every census area with a source
    row is used. A zero benchmark population raises
    DegenerateDenominator naming the area. Values carry full float
    precision; no rounding happens here.
    """
    rows: dict[str, BiasRow] = {}
    for area_id in _aligned_ids(source, census, area_ids):
        p = census.rows[area_id]
        if p == 0:
            raise DegenerateDenominator(f"census population is zero for {area_id!r}")
        coverage = 100.0 * source.rows[area_id] / p
        rows[area_id] = BiasRow(coverage=coverage, bias=100.0 - coverage)
    return BiasTable(source_id=source.source_id, rows=rows)


def national_summary(
    source: CountTable, census: CountTable, area_ids: list[str] | None = None
) -> CoverageSummary:
    """National coverage from summed totals over aligned areas.

    The national rate is the ratio of totals, not the mean of per-area
    ratios, so large areas weigh in proportionally.
    """
    ids = _aligned_ids(source, census, area_ids)
    if not ids:
        raise EmptySelection("no aligned areas between source and census")
    total_source = sum(source.rows[a] for a in ids)
    total_census = sum(census.rows[a] for a in ids)
    if total_census == 0:
        raise DegenerateDenominator("census total is zero over aligned areas")
    per_1000 = 1000.0 * total_source / total_census
    return CoverageSummary(
        source_id=source.source_id,
        national_coverage_per_1000=per_1000,
        national_bias=100.0 - per_1000 / 10.0,
        n_observations=float(total_source),
    )


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    kind: str  # "mpd" or "survey"
    coverage_per_1000: float
    bias: float
    n_observations: float


def survey_comparison(
    summaries: list[CoverageSummary],
    surveys: list[tuple[str, float, float]] = (),
) -> list[ComparisonRow]:
    """Rank phone-data sources and surveys on one coverage scale.

    Surveys come in as (name, respondents, reference_population) triples
    from run configuration. Rows sort by coverage per 1,000 descending,
    ties broken by name ascending.
    """
    rows = [
        ComparisonRow(
            name=s.source_id,
            kind="mpd",
            coverage_per_1000=s.national_coverage_per_1000,
            bias=s.national_bias,
            n_observations=s.n_observations,
        )
        for s in summaries
    ]
    for name, respondents, reference_pop in surveys:
        if reference_pop <= 0:
            raise DegenerateDenominator(f"survey {name!r} has non-positive reference population")
        per_1000 = 1000.0 * respondents / reference_pop
        rows.append(
            ComparisonRow(
                name=name,
                kind="survey",
                coverage_per_1000=per_1000,
                bias=100.0 - per_1000 / 10.0,
                n_observations=float(respondents),
            )
        )
    return sorted(rows, key=lambda r: (-r.coverage_per_1000, r.name))


def write_bias_table(table: BiasTable, path) -> None:
    """CSV export: ``area_id,coverage,bias`` at full precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "coverage", "bias"])
        for area_id, row in table.rows.items():
            writer.writerow([area_id, repr(row.coverage), repr(row.bias)])


def load_bias_table(path, source_id: str) -> BiasTable:
    rows: dict[str, BiasRow] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["area_id", "coverage", "bias"]:
            raise SchemaError(f"{path}: expected header 'area_id,coverage,bias'")
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            rows[row[0].strip()] = BiasRow(coverage=float(row[1]), bias=float(row[2]))
    return BiasTable(source_id=source_id, rows=rows)
