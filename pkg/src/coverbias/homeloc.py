"""Home-location inference from GPS pings and tile-count aggregation.

Two independent paths produce per-area population counts:

* the GPS path assigns each device a home area from its nighttime ping
  distribution (strict modal-share rule with a minimum-record floor),
* the tile path averages daily counts on Bing/Web-Mercator quadkey tiles
  within a chosen 8-hour window and assigns tile means to the area
  containing the tile center.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, DuplicateKey, EmptySelection, ParseError, SchemaError
from .ingest import AreaSet, CountTable, PingStream

log = logging.getLogger(__name__)

WINDOWS = ("W1", "W2", "W3")  # 00-08, 08-16, 16-24 local


def _parse_clock(value: str) -> int:
    """'HH:MM' -> seconds since local midnight."""
    try:
        hh, mm = value.split(":")
        hh, mm = int(hh), int(mm)
    except ValueError:
        raise SchemaError(f"bad clock time {value!r}, expected HH:MM") from None
    if not (0 <= hh < 24 and 0 <= mm < 60):
        raise DomainError(f"clock time {value!r} out of range")
    return hh * 3600 + mm * 60


@dataclass(frozen=True)
class HomeRule:
    """Nighttime residence rule.

    A device is homed to the area holding the strict majority of its
    nighttime pings, provided it has at least ``min_night_pings``
    nighttime records in total. The window may wrap midnight and is
    interpreted in local civil time via a fixed UTC offset configured
    once per run.
    """

    night_start: str = "22:00"
    night_end: str = "06:00"
    min_night_pings: int = 2
    modal_share_threshold: float = 0.5
    utc_offset_minutes: int = 0

    def __post_init__(self):
        if self.min_night_pings < 1:
            raise DomainError("min_night_pings must be >= 1")
        if not (0.0 < self.modal_share_threshold <= 1.0):
            raise DomainError("modal_share_threshold must be in (0, 1]")
        if _parse_clock(self.night_start) == _parse_clock(self.night_end):
            raise DomainError("night window is empty (start == end)")

    def is_night(self, timestamps: np.ndarray) -> np.ndarray:
        """Boolean mask of epoch-second timestamps inside the night window."""
        local = (np.asarray(timestamps, dtype=float) + self.utc_offset_minutes * 60) % 86400
        start = _parse_clock(self.night_start)
        end = _parse_clock(self.night_end)
        if start < end:
            return (local >= start) & (local < end)
        return (local >= start) | (local < end)


def detect_home(
    device_pings,
    areas: AreaSet,
    rule: HomeRule,
    stats: dict | None = None,
) -> str | None:
    """Infer the home area of a single device, or None.

    ``device_pings`` is a PingStream slice belonging to one device.
    Nighttime pings are mapped to areas by point-in-polygon; pings that
    fall in no area are dropped (and counted in ``stats['unmapped']``
    when a dict is supplied). The device is homed iff the total mapped
    nighttime pings reach ``min_night_pings`` AND the modal area holds a
    share strictly above ``modal_share_threshold``. A tie for the modal
    area yields no home: determinism over guessing.
    """
    if len(device_pings) == 0:
        return None
    unique_devices = set(device_pings.device_ids.tolist())
    if len(unique_devices) > 1:
        raise DomainError(f"pings from multiple devices: {sorted(unique_devices)}")

    night = rule.is_night(device_pings.timestamps)
    counts: dict[str, int] = {}
    unmapped = 0
    for i in np.nonzero(night)[0]:
        area_id = areas.area_containing(device_pings.lons[i], device_pings.lats[i])
        if area_id is None:
            unmapped += 1
        else:
            counts[area_id] = counts.get(area_id, 0) + 1
    if stats is not None:
        stats["unmapped"] = stats.get("unmapped", 0) + unmapped

    total = sum(counts.values())
    if total < rule.min_night_pings or not counts:
        return None
    top = max(counts.values())
    modal = [a for a, c in counts.items() if c == top]
    if len(modal) != 1:
        return None
    if top / total > rule.modal_share_threshold:
        return modal[0]
    return None


def detect_homes(
    pings, areas: AreaSet, rule: HomeRule, stats: dict | None = None
) -> dict[str, str]:
    """Run detect_home per device. Independent per device, so the result
    is identical however device groups are scheduled."""
    homes: dict[str, str] = {}
    for device_id, idx in pings.by_device():
        sub = PingStream(
            device_ids=pings.device_ids[idx],
            timestamps=pings.timestamps[idx],
            lons=pings.lons[idx],
            lats=pings.lats[idx],
        )
        area_id = detect_home(sub, areas, rule, stats=stats)
        if area_id is not None:
            homes[device_id] = area_id
    return homes


def aggregate_homes(
    homes: dict[str, str],
    source_id: str,
    areas: AreaSet | None = None,
    reference_period: str = "",
) -> CountTable:
    """Count homed devices per area.

    With ``areas`` supplied, every area appears (zero-filled) and
    unknown area ids raise DomainError; otherwise only observed areas
    appear. The column sum always equals the number of homed devices.
    """
    rows: dict[str, float] = {}
    if areas is not None:
        rows = {a: 0.0 for a in areas.ids}
    for device_id, area_id in homes.items():
        if areas is not None and area_id not in areas:
            raise DomainError(f"device {device_id!r} homed to unknown area {area_id!r}")
        rows[area_id] = rows.get(area_id, 0.0) + 1.0
    return CountTable(source_id=source_id, reference_period=reference_period, rows=rows)


# --- Web-Mercator quadkey tiles -------------------------------------------

MIN_LEVEL, MAX_LEVEL = 1, 23


@dataclass(frozen=True)
class TileKey:
    """One tile of the quadkey (Bing Maps) tile pyramid."""

    level: int
    x: int
    y: int

    def __post_init__(self):
        if not (MIN_LEVEL <= self.level <= MAX_LEVEL):
            raise DomainError(f"tile level {self.level} outside [{MIN_LEVEL}, {MAX_LEVEL}]")
        n = 1 << self.level
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise DomainError(f"tile ({self.x}, {self.y}) outside level-{self.level} grid")

    @property
    def quadkey(self) -> str:
        digits = []
        for i in range(self.level, 0, -1):
            mask = 1 << (i - 1)
            digit = 0
            if self.x & mask:
                digit += 1
            if self.y & mask:
                digit += 2
            digits.append(str(digit))
        return "".join(digits)

    @classmethod
    def from_quadkey(cls, quadkey: str) -> "TileKey":
        if not quadkey or any(c not in "0123" for c in quadkey):
            raise SchemaError(f"bad quadkey {quadkey!r}")
        x = y = 0
        level = len(quadkey)
        for i, c in enumerate(quadkey):
            mask = 1 << (level - 1 - i)
            digit = int(c)
            if digit & 1:
                x |= mask
            if digit & 2:
                y |= mask
        return cls(level=level, x=x, y=y)


def tile_center(key: TileKey) -> tuple[float, float]:
    """WGS84 (lon, lat) of the tile center.

    Follows the Web-Mercator pixel equations: a tile spans 256 pixels of
    a 256*2^level map, longitude is linear in pixel x, latitude is the
    inverse of the Mercator sinusoidal projection of pixel y.
    """
    n = 256.0 * (1 << key.level)
    px = (key.x + 0.5) * 256.0
    py = (key.y + 0.5) * 256.0
    lon = px / n * 360.0 - 180.0
    v = 2.0 * math.pi * (0.5 - py / n)
    lat = math.degrees(2.0 * math.atan(math.exp(v)) - math.pi / 2.0)
    return lon, lat


@dataclass(frozen=True)
class TileCount:
    date: str
    window: str
    tile: TileKey
    count: float


def load_tile_counts(path) -> list[TileCount]:
    """Load ``date,window,quadkey,count`` CSV rows (window in W1/W2/W3)."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["date", "window", "quadkey", "count"]
        if header is None or [h.strip() for h in header] != expected:
            raise SchemaError(f"{path}: expected header {','.join(expected)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                date, window, quadkey, count_s = (c.strip() for c in row)
                count = float(count_s)
            except ValueError:
                raise ParseError(f"{path}: bad tile-count row", lineno) from None
            window = window.upper()
            if window not in WINDOWS:
                raise SchemaError(
                    f"{path}: unknown window {window!r} (line {lineno}), expected one of {WINDOWS}"
                )
            if count < 0 or not np.isfinite(count):
                raise DomainError(f"{path}: bad count {count} (line {lineno})")
            out.append(TileCount(date=date, window=window, tile=TileKey.from_quadkey(quadkey), count=count))
    return out


def window_average_counts(
    tile_counts: list[TileCount],
    select_window: str,
    areas: AreaSet,
    source_id: str = "tiles",
    reference_period: str = "",
    drop_log: list[str] | None = None,
) -> CountTable:
    """Average tile counts over dates, then assign tile means to areas.

    Order of operations is fixed: temporal average first (each tile's
    mean over the dates it was observed in the selected window), then
    spatial assignment of the mean to the area containing the tile
    center. Tiles whose center falls in no area are dropped; their
    quadkeys go to ``drop_log`` when provided. Every area appears in the
    result, zero-filled when no tile landed in it.
    """
    select_window = select_window.upper()
    if select_window not in WINDOWS:
        raise SchemaError(f"unknown window {select_window!r}")
    selected = [t for t in tile_counts if t.window == select_window]
    if not selected:
        raise EmptySelection(f"no tile counts for window {select_window}")

    per_tile: dict[TileKey, dict[str, float]] = {}
    for rec in selected:
        dates = per_tile.setdefault(rec.tile, {})
        if rec.date in dates:
            raise DuplicateKey(
                f"duplicate tile count for {rec.tile.quadkey} on {rec.date} ({rec.window})"
            )
        dates[rec.date] = rec.count

    rows = {a: 0.0 for a in areas.ids}
    for tile, dates in per_tile.items():
        mean = float(sum(dates.values()) / len(dates))
        lon, lat = tile_center(tile)
        area_id = areas.area_containing(lon, lat)
        if area_id is None:
            log.warning("tile %s center outside all areas; dropped", tile.quadkey)
            if drop_log is not None:
                drop_log.append(tile.quadkey)
            continue
        rows[area_id] += mean
    return CountTable(source_id=source_id, reference_period=reference_period, rows=rows)
