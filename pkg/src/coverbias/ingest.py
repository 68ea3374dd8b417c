"""Loaders and alignment checks for the shared data model.

Everything downstream works on four immutable containers built here:
``AreaSet`` (georeferenced areal units), ``CountTable`` (per-area counts
from one source or the census benchmark), ``CovariateTable`` (per-area
feature vectors) and ``PingStream`` (raw device GPS records).

File formats are deliberately boring: GeoJSON (RFC 7946) for geometry,
RFC 4180 CSV with a header row for everything tabular. Counts are reals
because upstream temporal averaging yields fractional values; census
counts share the type.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
from shapely import STRtree
from shapely.geometry import MultiPolygon, Point, Polygon, mapping, shape

from .errors import (
    DomainError,
    DuplicateKey,
    GeometryError,
    ParseError,
    SchemaError,
)

COVARIATE_GROUPS = (
    "demographic",
    "socioeconomic",
    "resource_accessibility",
    "mobility",
    "geographic",
)

# Web-Mercator-safe latitude band
LAT_LIMIT = 85.05113


@dataclass(frozen=True)
class Area:
    area_id: str
    name: str
    geometry: Polygon | MultiPolygon
    centroid: tuple[float, float]  # (lon, lat)


class AreaSet:
    """Ordered collection of areal units with spatial lookup.

    Raises on construction if ids are duplicated/empty or a centroid
    falls outside its geometry's bounding box.
    """

    def __init__(self, areas: list[Area]):
        seen = set()
        for a in areas:
            if not a.area_id:
                raise SchemaError("empty area_id")
            if a.area_id in seen:
                raise DuplicateKey(f"duplicate area_id {a.area_id!r}")
            seen.add(a.area_id)
            minx, miny, maxx, maxy = a.geometry.bounds
            lon, lat = a.centroid
            if not (minx <= lon <= maxx and miny <= lat <= maxy):
                raise GeometryError(
                    f"centroid of {a.area_id!r} outside geometry bounding box"
                )
        self.areas = list(areas)
        self._by_id = {a.area_id: a for a in self.areas}
        self._tree: STRtree | None = None

    @property
    def ids(self) -> list[str]:
        return [a.area_id for a in self.areas]

    def __len__(self):
        return len(self.areas)

    def __iter__(self):
        return iter(self.areas)

    def __contains__(self, area_id):
        return area_id in self._by_id

    def __getitem__(self, area_id: str) -> Area:
        return self._by_id[area_id]

    def _spatial_index(self) -> STRtree:
        if self._tree is None:
            self._tree = STRtree([a.geometry for a in self.areas])
        return self._tree

    def area_containing(self, lon: float, lat: float) -> str | None:
        """Return the id of the first area covering the point, else None.

        Boundary points count as inside; ties on shared boundaries are
        broken by area input order so the mapping is deterministic.
        """
        hits = self._spatial_index().query(Point(lon, lat), predicate="covered_by")
        if len(hits) == 0:
            return None
        return self.areas[int(min(hits))].area_id


@dataclass(frozen=True)
class CountTable:
    """Per-area population counts from one source (or the census)."""

    source_id: str
    reference_period: str  # ISO-8601 date range, e.g. "2021-03-01/2021-03-31"
    rows: dict[str, float]

    def __post_init__(self):
        for area_id, count in self.rows.items():
            if not np.isfinite(count) or count < 0:
                raise DomainError(
                    f"count for {area_id!r} must be finite and >= 0, got {count}"
                )

    def total(self) -> float:
        return float(sum(self.rows.values()))


@dataclass(frozen=True)
class Feature:
    name: str
    group: str
    unit: str = ""

    def __post_init__(self):
        if self.group not in COVARIATE_GROUPS:
            raise SchemaError(
                f"unknown covariate group {self.group!r} for {self.name!r}; "
                f"expected one of {COVARIATE_GROUPS}"
            )


@dataclass(frozen=True)
class CovariateTable:
    """Per-area feature vectors with grouped feature metadata."""

    features: list[Feature]
    rows: dict[str, np.ndarray]
    label: str = "covariates"

    def __post_init__(self):
        width = len(self.features)
        for area_id, vec in self.rows.items():
            if len(vec) != width:
                raise SchemaError(
                    f"feature vector for {area_id!r} has length {len(vec)}, "
                    f"expected {width}"
                )
            if not np.all(np.isfinite(vec)):
                raise DomainError(f"non-finite covariate value for {area_id!r}")

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def qualified_names(self) -> list[str]:
        """Collision-proof labels, matching CSV headers: 'group:name'."""
        return [f"{f.group}:{f.name}" for f in self.features]

    def matrix(self, area_ids: list[str]) -> np.ndarray:
        return np.array([self.rows[a] for a in area_ids], dtype=float)


@dataclass(frozen=True)
class PingStream:
    """Device GPS records as parallel arrays, ordered as loaded."""

    device_ids: np.ndarray  # object/str
    timestamps: np.ndarray  # UTC epoch seconds, float
    lons: np.ndarray
    lats: np.ndarray

    def __len__(self):
        return len(self.timestamps)

    def by_device(self):
        """Yield (device_id, index array) groups, devices in first-seen order."""
        order: dict[str, list[int]] = {}
        for i, d in enumerate(self.device_ids):
            order.setdefault(d, []).append(i)
        for device_id, idx in order.items():
            yield device_id, np.asarray(idx, dtype=int)


def parse_period(period: str) -> tuple[datetime, datetime]:
    """Parse "YYYY-MM-DD/YYYY-MM-DD" into UTC [start, end) datetimes."""
    try:
        start_s, end_s = period.split("/")
        start = datetime.fromisoformat(start_s).replace(tzinfo=timezone.utc)
        end = datetime.fromisoformat(end_s).replace(tzinfo=timezone.utc) + timedelta(days=1)
    except ValueError as exc:
        raise SchemaError(f"bad reference period {period!r}: {exc}") from None
    if end <= start:
        raise SchemaError(f"empty reference period {period!r}")
    return start, end


def _check_ring(ring, area_id):
    if len(ring) < 4:
        raise GeometryError(f"ring with {len(ring)} vertices in {area_id!r} (need >= 4)")
    if list(ring[0]) != list(ring[-1]):
        raise GeometryError(f"unclosed ring in {area_id!r}")


def load_area_geometries(path) -> AreaSet:
    """Load a GeoJSON FeatureCollection into an AreaSet.

    Each feature must carry an ``area_id`` property; an optional ``name``
    property supplies the display name. Feature order is preserved.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno) from None
    if doc.get("type") != "FeatureCollection":
        raise SchemaError(f"{path}: expected a GeoJSON FeatureCollection")
    areas = []
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        if "area_id" not in props or props["area_id"] in (None, ""):
            raise SchemaError(f"{path}: feature without an area_id property")
        area_id = str(props["area_id"])
        geom_obj = feat.get("geometry") or {}
        gtype = geom_obj.get("type")
        coords = geom_obj.get("coordinates", [])
        if gtype == "Polygon":
            rings = [coords]
        elif gtype == "MultiPolygon":
            rings = coords
        else:
            raise GeometryError(f"{area_id!r}: unsupported geometry type {gtype!r}")
        for poly in rings:
            if not poly:
                raise GeometryError(f"{area_id!r}: polygon without rings")
            for ring in poly:
                _check_ring(ring, area_id)
        geom = shape(geom_obj)
        c = geom.centroid
        areas.append(
            Area(
                area_id=area_id,
                name=str(props.get("name", area_id)),
                geometry=geom,
                centroid=(c.x, c.y),
            )
        )
    return AreaSet(areas)


def write_area_geometries(areas: AreaSet, path) -> None:
    features = [
        {
            "type": "Feature",
            "properties": {"area_id": a.area_id, "name": a.name},
            "geometry": mapping(a.geometry),
        }
        for a in areas
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)


def load_count_table(path, source_id: str, reference_period: str = "") -> CountTable:
    """Load a ``area_id,count`` CSV into a CountTable.

    The reference period is not stored in the file; it comes from run
    configuration. Negative counts raise DomainError, unparsable rows
    ParseError with the offending line number.
    """
    rows: dict[str, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["area_id", "count"]:
            raise SchemaError(f"{path}: expected header 'area_id,count'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise ParseError(f"{path}: expected 2 columns", lineno)
            area_id = row[0].strip()
            try:
                count = float(row[1])
            except ValueError:
                raise ParseError(f"{path}: unparsable count {row[1]!r}", lineno) from None
            if not np.isfinite(count):
                raise DomainError(f"{path}: non-finite count for {area_id!r}")
            if count < 0:
                raise DomainError(f"{path}: negative count for {area_id!r}")
            if area_id in rows:
                raise DuplicateKey(f"{path}: duplicate area_id {area_id!r}")
            rows[area_id] = count
    return CountTable(source_id=source_id, reference_period=reference_period, rows=rows)


def write_count_table(table: CountTable, path) -> None:
    """Write a CountTable back to CSV, preserving full float precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "count"])
        for area_id, count in table.rows.items():
            writer.writerow([area_id, repr(float(count))])


def load_covariates(path, label: str = "covariates") -> CovariateTable:
    """Load covariates from CSV with ``group:name`` feature headers.

    Header: ``area_id`` followed by one column per feature, each named
    ``<group>:<feature-name>`` with group drawn from COVARIATE_GROUPS.
    Missing cells are hard errors; the pipeline never imputes.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "area_id":
            raise SchemaError(f"{path}: first column must be 'area_id'")
        features = []
        for col in header[1:]:
            col = col.strip()
            if ":" not in col:
                raise SchemaError(
                    f"{path}: covariate column {col!r} must be '<group>:<name>'"
                )
            group, name = col.split(":", 1)
            features.append(Feature(name=name, group=group))
        rows: dict[str, np.ndarray] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: expected {len(header)} columns, got {len(row)}", lineno
                )
            area_id = row[0].strip()
            if area_id in rows:
                raise DuplicateKey(f"{path}: duplicate area_id {area_id!r}")
            values = []
            for col, cell in zip(header[1:], row[1:]):
                if cell.strip() == "":
                    raise DomainError(
                        f"{path}: missing value for {col!r} in {area_id!r} (line {lineno})"
                    )
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: unparsable value {cell!r} in column {col!r}", lineno
                    ) from None
            rows[area_id] = np.asarray(values, dtype=float)
    return CovariateTable(features=features, rows=rows, label=label)


def write_covariates(table: CovariateTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id"] + [f"{f.group}:{f.name}" for f in table.features])
        for area_id, vec in table.rows.items():
            writer.writerow([area_id] + [repr(float(v)) for v in vec])


def load_pings(path, reference_period: str | None = None) -> PingStream:
    """Load device GPS records from CSV or newline-delimited JSON.

    Both formats carry ``device_id,timestamp,lon,lat``. Coordinates are
    validated against the Web-Mercator-safe band and, when a reference
    period is given, timestamps must fall inside it.
    """
    device_ids, timestamps, lons, lats = [], [], [], []

    def add(device_id, ts, lon, lat, lineno):
        if not (-180.0 <= lon <= 180.0):
            raise DomainError(f"{path}: longitude {lon} out of range (line {lineno})")
        if not (-LAT_LIMIT <= lat <= LAT_LIMIT):
            raise DomainError(f"{path}: latitude {lat} out of range (line {lineno})")
        device_ids.append(device_id)
        timestamps.append(ts)
        lons.append(lon)
        lats.append(lat)

    text = open(path, encoding="utf-8", newline="")
    with text as fh:
        first = fh.read(1)
        fh.seek(0)
        if first == "{":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    add(
                        str(rec["device_id"]),
                        float(rec["timestamp"]),
                        float(rec["lon"]),
                        float(rec["lat"]),
                        lineno,
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise ParseError(f"{path}: bad ping record", lineno) from None
        else:
            reader = csv.reader(fh)
            header = next(reader, None)
            expected = ["device_id", "timestamp", "lon", "lat"]
            if header is None or [h.strip() for h in header] != expected:
                raise SchemaError(f"{path}: expected header {','.join(expected)!r}")
            for lineno, row in enumerate(reader, start=2):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                try:
                    add(row[0].strip(), float(row[1]), float(row[2]), float(row[3]), lineno)
                except (IndexError, ValueError):
                    raise ParseError(f"{path}: bad ping row", lineno) from None

    ts = np.asarray(timestamps, dtype=float)
    if reference_period:
        start, end = parse_period(reference_period)
        lo, hi = start.timestamp(), end.timestamp()
        if len(ts) and (ts.min() < lo or ts.max() >= hi):
            raise DomainError(
                f"{path}: ping timestamps outside reference period {reference_period}"
            )
    return PingStream(
        device_ids=np.asarray(device_ids, dtype=object),
        timestamps=ts,
        lons=np.asarray(lons, dtype=float),
        lats=np.asarray(lats, dtype=float),
    )


@dataclass
class AlignmentReport:
    """Key agreement between an AreaSet and a set of tables.

    Every id lands in exactly one bucket: ``aligned`` (present in the
    AreaSet and all tables), ``missing`` (in the AreaSet, absent from at
    least one table) or ``extra`` (in some table, unknown to the AreaSet).
    """

    aligned: list[str]
    missing: list[str]
    extra: list[str]
    per_table: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing and not self.extra

    def to_dict(self) -> dict:
        return {
            "aligned_count": len(self.aligned),
            "missing": self.missing,
            "extra": self.extra,
            "per_table": self.per_table,
            "notes": self.notes,
        }


def _table_label(table) -> str:
    return getattr(table, "source_id", None) or getattr(table, "label", "table")


def validate_alignment(areas: AreaSet, tables: list) -> AlignmentReport:
    """Report id mismatches between the AreaSet and count/covariate tables.

    Purely diagnostic: callers decide whether a non-empty ``missing`` or
    ``extra`` list aborts the run or restricts analysis to ``aligned``
    (the `--allow-partial` path).
    """
    area_ids = set(areas.ids)
    missing: set[str] = set()
    extra: set[str] = set()
    per_table = {}
    for table in tables:
        table_ids = set(table.rows.keys())
        t_missing = sorted(area_ids - table_ids)
        t_extra = sorted(table_ids - area_ids)
        per_table[_table_label(table)] = {"missing": t_missing, "extra": t_extra}
        missing.update(t_missing)
        extra.update(t_extra)
    aligned = [a for a in areas.ids if a not in missing]
    return AlignmentReport(
        aligned=aligned,
        missing=sorted(missing),
        extra=sorted(extra),
        per_table=per_table,
    )
