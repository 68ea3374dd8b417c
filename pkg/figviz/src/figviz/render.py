"""Turn an audit report bundle into the five figure families.

Everything plotted here appears verbatim in `report.json`: bars, hex
colors, histogram steps, curves and bands are read, never recomputed.
Output bytes are deterministic for identical inputs: fixed figure
geometry, pinned svg hash salt, no timestamps in file metadata.
"""

import json
import re
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import Normalize
from matplotlib.patches import RegularPolygon

from .errors import ReportError
from .layout import HexLayout, load_layout

SUPPORTED_SCHEMAS = {1}
FORMATS = ("png", "svg")

DPI = 100
HEX_RADIUS = 0.55

SOURCE_COLOR = "#3b6ea5"
SOURCE_MUTED = "#9db8d2"
SURVEY_COLOR = "#8a8a8a"
HIGHLIGHT_COLOR = "#c23b22"
BAND_COLOR = "#3b6ea5"


def load_report(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError as exc:
        raise ReportError(f"cannot read report: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"report is not valid JSON: {exc}") from None
    if not isinstance(report, dict):
        raise ReportError("report must be a JSON object")
    version = report.get("schema_version")
    if version not in SUPPORTED_SCHEMAS:
        raise ReportError(
            f"unsupported report schema_version {version!r}; supported: {sorted(SUPPORTED_SCHEMAS)}"
        )
    return report


def _slug(source_id: str) -> str:
    return re.sub(r"[^-A-Za-z0-9_.]", "_", source_id) or "source"


def _save(fig, out_dir: Path, stem: str, formats) -> list[Path]:
    written = []
    for fmt in formats:
        path = out_dir / f"{stem}.{fmt}"
        metadata = {"Date": None} if fmt == "svg" else {"Software": "figviz"}
        fig.savefig(path, format=fmt, dpi=DPI, metadata=metadata)
        written.append(path)
    plt.close(fig)
    return written


# --- figure families -------------------------------------------------------


def comparison_figure(report: dict, source_id: str):
    """Horizontal coverage bars for every source and survey, one source
    highlighted so each per-source file set stands alone."""
    rows = report["comparison"]
    fig, ax = plt.subplots(figsize=(10, 6))
    names = [r["name"] for r in rows]
    values = [r["coverage_per_1000"] for r in rows]
    colors = []
    for r in rows:
        if r["kind"] == "survey":
            colors.append(SURVEY_COLOR)
        elif r["name"] == source_id:
            colors.append(SOURCE_COLOR)
        else:
            colors.append(SOURCE_MUTED)
    y = np.arange(len(rows))
    ax.barh(y, values, color=colors, height=0.65)
    for i, r in enumerate(rows):
        ax.annotate(
            f"bias {r['bias']:.1f}",
            (values[i], i),
            xytext=(4, 0),
            textcoords="offset points",
            va="center",
            fontsize=8,
        )
    ax.set_yticks(y, names)
    ax.invert_yaxis()  # first record on top, matching the report order
    ax.set_xlabel("population covered per 1,000 residents")
    ax.set_title(f"Coverage by data source ({source_id} highlighted)")
    fig.tight_layout()
    return fig


def _hex_map(ax, bias_rows: list[dict], layout: HexLayout):
    values = {r["area_id"]: r["bias"] for r in bias_rows}
    span = max((abs(v) for v in values.values()), default=1.0) or 1.0
    norm = Normalize(vmin=-span, vmax=span)
    cmap = matplotlib.colormaps["RdBu_r"]

    missing = sorted(a for a in values if a not in layout)
    placed = [a for a in values if a in layout]
    for area_id in placed:
        x, yy = layout.center(area_id)
        ax.add_patch(
            RegularPolygon(
                (x, yy),
                numVertices=6,
                radius=HEX_RADIUS,
                facecolor=cmap(norm(values[area_id])),
                edgecolor="white",
                linewidth=0.5,
            )
        )
    if missing:
        # park absentees in a spare row below the map rather than dropping them
        spare_row = max(r for _, r in layout.cells.values()) + 2
        start_col = min(c for c, _ in layout.cells.values())
        for k, area_id in enumerate(missing):
            warnings.warn(f"area {area_id!r} missing from hex layout; drawn hollow")
            x = start_col + k + 0.5 * (spare_row % 2)
            yy = spare_row * 0.8660254037844386
            ax.add_patch(
                RegularPolygon(
                    (x, yy),
                    numVertices=6,
                    radius=HEX_RADIUS,
                    facecolor="none",
                    edgecolor="#999999",
                    linestyle="--",
                    linewidth=0.8,
                )
            )
    ax.autoscale_view()
    ax.set_aspect("equal")
    ax.axis("off")
    sm = plt.cm.ScalarMappable(norm=norm, cmap=cmap)
    plt.colorbar(sm, ax=ax, shrink=0.8, label="bias (percentage points)")
    return len(missing)


def bias_map_figure(source: dict, layout: HexLayout):
    """Hex cartogram of per-area bias plus its histogram and the
    bias-vs-population scatter."""
    fig = plt.figure(figsize=(12, 6))
    gs = fig.add_gridspec(2, 2, width_ratios=[1.6, 1.0])
    ax_map = fig.add_subplot(gs[:, 0])
    ax_hist = fig.add_subplot(gs[0, 1])
    ax_scatter = fig.add_subplot(gs[1, 1])

    _hex_map(ax_map, source["bias"], layout)
    ax_map.set_title(f"Bias by area ({source['source_id']})")

    hist = source["histogram"]
    ax_hist.stairs(hist["counts"], hist["edges"], fill=True, color=SOURCE_COLOR)
    ax_hist.set_xlabel("bias (percentage points)")
    ax_hist.set_ylabel("areas")

    scatter = source["population_scatter"]
    pop = [r["population"] for r in scatter]
    b = [r["bias"] for r in scatter]
    ax_scatter.scatter(pop, b, s=12, color=SOURCE_COLOR, alpha=0.7)
    ax_scatter.set_xscale("log")
    ax_scatter.set_xlabel("census population")
    ax_scatter.set_ylabel("bias (percentage points)")
    pearson = source["pearson"]
    ax_scatter.annotate(
        f"r = {pearson['r']:.3f}, p = {pearson['p_value']:.3g}",
        (0.03, 0.92),
        xycoords="axes fraction",
        fontsize=9,
    )
    fig.tight_layout()
    return fig


def radial_figure(source: dict):
    """Radial bars of normalized importance; exported highlight flags
    pick the bar color, the 0.5 ring is drawn for reference."""
    rows = source["importance"]
    n = len(rows)
    fig = plt.figure(figsize=(7, 7))
    ax = fig.add_subplot(projection="polar")
    theta = np.arange(n) * 2 * np.pi / max(n, 1)
    heights = [r["normalized"] for r in rows]
    colors = [HIGHLIGHT_COLOR if r["above_threshold"] else "#b0b0b0" for r in rows]
    ax.bar(theta, heights, width=2 * np.pi / max(n, 1) * 0.85, color=colors, alpha=0.9)
    ring = np.linspace(0, 2 * np.pi, 100)
    ax.plot(ring, np.full(100, 0.5), color="#444444", linestyle="--", linewidth=0.8)
    ax.set_ylim(0, 1.05)
    ax.set_xticks(theta)
    ax.set_xticklabels([r["feature"] for r in rows], fontsize=7)
    ax.set_yticks([0.5, 1.0])
    ax.set_title(f"Normalized driver importance ({source['source_id']})")
    fig.tight_layout()
    return fig


def beeswarm_figure(source: dict):
    """Attribution strip per feature, colored by the exported feature
    value percentile; vertical placement also comes from the percentile
    so the figure needs no random jitter."""
    records = source["beeswarm"]
    features = []
    for r in sorted(records, key=lambda r: r["rank"]):
        if r["feature"] not in features:
            features.append(r["feature"])
    fig, ax = plt.subplots(figsize=(9, 6))
    cmap = matplotlib.colormaps["coolwarm"]
    row_of = {f: i for i, f in enumerate(features)}
    xs = [r["shap"] for r in records]
    ys = [row_of[r["feature"]] + (r["percentile"] - 50.0) / 150.0 for r in records]
    cs = [r["percentile"] for r in records]
    pts = ax.scatter(xs, ys, c=cs, cmap=cmap, vmin=0, vmax=100, s=14, alpha=0.85)
    ax.axvline(0.0, color="#444444", linewidth=0.8)
    ax.set_yticks(range(len(features)), features)
    ax.invert_yaxis()  # rank 1 on top
    ax.set_xlabel("attribution (percentage points of bias)")
    plt.colorbar(pts, ax=ax, label="feature value percentile")
    ax.set_title(f"Per-area attributions ({source['source_id']})")
    fig.tight_layout()
    return fig


def dependence_figure(source: dict):
    """Exported dependence curves with their 95% bands; when an outcome
    curve was exported it is overlaid on a second axis, no re-fitting."""
    docs = source["dependence"]
    n = max(len(docs), 1)
    fig, axes = plt.subplots(1, n, figsize=(5.5 * n, 4.5), squeeze=False)
    if not docs:
        axes[0][0].annotate(
            "no dependence curves exported",
            (0.5, 0.5),
            xycoords="axes fraction",
            ha="center",
        )
        axes[0][0].axis("off")
    for ax, doc in zip(axes[0], docs):
        ax.scatter(doc["x"], doc["shap"], s=10, color="#9a9a9a", alpha=0.5)
        curve = doc["shap_curve"]
        ax.fill_between(
            curve["grid"], curve["lower"], curve["upper"], color=BAND_COLOR, alpha=0.2
        )
        ax.plot(curve["grid"], curve["fit"], color=BAND_COLOR, linewidth=1.6)
        ax.set_xlabel(doc["feature"])
        ax.set_ylabel("attribution")
        if "target_curve" in doc:
            twin = ax.twinx()
            tc = doc["target_curve"]
            twin.plot(tc["grid"], tc["fit"], color="#777777", linestyle="--", linewidth=1.2)
            twin.set_ylabel("bias (smoothed)", color="#777777")
    fig.suptitle(f"Attribution dependence ({source['source_id']})")
    fig.tight_layout()
    return fig


# --- driver ----------------------------------------------------------------


def render(report_path, hexes_path, out_dir, formats=("png",)) -> list[Path]:
    """Write one file per figure family per source; returns the paths."""
    for fmt in formats:
        if fmt not in FORMATS:
            raise ReportError(f"unknown format {fmt!r}; supported: {FORMATS}")
    report = load_report(report_path)
    layout = load_layout(hexes_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    plt.rcParams["svg.hashsalt"] = "figviz"

    written: list[Path] = []
    for source in report.get("sources", []):
        sid = _slug(source["source_id"])
        written += _save(comparison_figure(report, source["source_id"]), out, f"comparison_{sid}", formats)
        written += _save(bias_map_figure(source, layout), out, f"bias_map_{sid}", formats)
        written += _save(radial_figure(source), out, f"radial_{sid}", formats)
        written += _save(beeswarm_figure(source), out, f"beeswarm_{sid}", formats)
        written += _save(dependence_figure(source), out, f"dependence_{sid}", formats)
    return written
