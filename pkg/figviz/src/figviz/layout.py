"""Hex-cartogram layout: an externally supplied area -> cell mapping.

The layout is a plain CSV (`area_id,col,row`) produced by whatever
cartogram tool the analyst prefers; nothing here optimizes placement.
Rows use odd-row offset packing when drawn.
"""

import csv
from dataclasses import dataclass

from .errors import LayoutError


@dataclass(frozen=True)
class HexLayout:
    cells: dict[str, tuple[int, int]]

    def __contains__(self, area_id) -> bool:
        return area_id in self.cells

    def __getitem__(self, area_id) -> tuple[int, int]:
        return self.cells[area_id]

    def center(self, area_id) -> tuple[float, float]:
        """Drawing-plane center of a cell, odd rows shifted half a column."""
        col, row = self.cells[area_id]
        return col + 0.5 * (row % 2), row * 0.8660254037844386


def load_layout(path) -> HexLayout:
    cells: dict[str, tuple[int, int]] = {}
    seen_coords: set[tuple[int, int]] = set()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise LayoutError(f"cannot read layout: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["area_id", "col", "row"]:
            raise LayoutError(f"layout must start with 'area_id,col,row', got {header}")
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != 3:
                raise LayoutError(f"line {lineno}: expected 3 columns, got {len(fields)}")
            area_id = fields[0]
            if not area_id:
                raise LayoutError(f"line {lineno}: empty area_id")
            if area_id in cells:
                raise LayoutError(f"line {lineno}: duplicate area_id {area_id!r}")
            try:
                coord = (int(fields[1]), int(fields[2]))
            except ValueError:
                raise LayoutError(
                    f"line {lineno}: col/row must be integers, got {fields[1:]!r}"
                ) from None
            if coord in seen_coords:
                raise LayoutError(f"line {lineno}: cell {coord} assigned twice")
            seen_coords.add(coord)
            cells[area_id] = coord
    if not cells:
        raise LayoutError("layout has no cells")
    return HexLayout(cells)
