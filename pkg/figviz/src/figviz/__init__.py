"""Figure renderer for coverage-bias audit report bundles."""

from .errors import FigvizError, LayoutError, ReportError
from .layout import HexLayout, load_layout
from .render import load_report, render

__all__ = [
    "FigvizError",
    "HexLayout",
    "LayoutError",
    "ReportError",
    "load_layout",
    "load_report",
    "render",
]
