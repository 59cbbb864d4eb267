"""Delimited metrics output and a small SVG line-chart emitter.

CSV files are append-only with a fixed header written once. Reading
tolerates damaged files: rows with the wrong column count or unparsable
numbers are skipped with a logged warning rather than failing the whole
run. The SVG emitter depends on nothing outside the standard library and
formats every coordinate with two decimals, so charts are byte-stable
across runs given equal inputs.
"""

from __future__ import annotations

import csv
import logging
import os
from xml.sax.saxutils import escape

log = logging.getLogger(__name__)

TRAIN_FIELDS = ("scheme", "step", "loss", "loss_tf", "loss_csf", "nfe", "wall_time")
EVAL_FIELDS_BASE = ("scheme", "step", "fd", "precision", "recall", "nfe")


def eval_fields(num_scales: int) -> tuple[str, ...]:
    return EVAL_FIELDS_BASE + tuple(f"fd_scale{i}" for i in range(1, num_scales + 1))


class MetricsWriter:
    """Append rows to a CSV file, writing the header on first touch."""

    def __init__(self, path: str, fields: tuple[str, ...]):
        self.path = path
        self.fields = fields
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(fields)

    def write(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_format_cell(row.get(f, "")) for f in self.fields])


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def read_metrics(path: str) -> list[dict]:
    """Parse a metrics CSV; malformed rows are skipped with a warning."""
    rows: list[dict] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                log.warning("%s:%d: expected %d columns, got %d; row skipped",
                            path, lineno, len(header), len(raw))
                continue
            row = dict(zip(header, raw))
            ok = True
            for key in ("step", "loss", "fd", "nfe"):
                if key in row and row[key] != "":
                    try:
                        float(row[key])
                    except ValueError:
                        log.warning("%s:%d: bad %s value %r; row skipped", path, lineno, key, row[key])
                        ok = False
                        break
            if ok:
                rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# SVG chart

CHART_W = 640.0
CHART_H = 400.0
MARGIN_L = 60.0
MARGIN_R = 20.0
MARGIN_T = 20.0
MARGIN_B = 45.0
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _data_range(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        # degenerate span: pad by half a unit each side
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def chart_transform(
    xs: list[float], ys: list[float]
) -> tuple[float, float, float, float]:
    """Affine map from data space to pixel space.

    Returns (x_lo, x_scale, y_lo, y_scale) such that
    px = MARGIN_L + (x - x_lo) * x_scale and
    py = CHART_H - MARGIN_B - (y - y_lo) * y_scale.
    """
    x_lo, x_hi = _data_range(xs)
    y_lo, y_hi = _data_range(ys)
    x_scale = (CHART_W - MARGIN_L - MARGIN_R) / (x_hi - x_lo)
    y_scale = (CHART_H - MARGIN_T - MARGIN_B) / (y_hi - y_lo)
    return x_lo, x_scale, y_lo, y_scale


def svg_line_chart(
    series: dict[str, list[tuple[float, float]]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
) -> str:
    """Render named (x, y) series as one SVG document string.

    Empty input still yields a valid chart with axes and no polylines.
    """
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W:.0f}" height="{CHART_H:.0f}" '
        f'viewBox="0 0 {CHART_W:.0f} {CHART_H:.0f}">',
        f'<rect width="{CHART_W:.0f}" height="{CHART_H:.0f}" fill="white"/>',
    ]
    plot_w = CHART_W - MARGIN_L - MARGIN_R
    plot_h = CHART_H - MARGIN_T - MARGIN_B
    x_axis_y = CHART_H - MARGIN_B

    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    have_data = bool(xs)
    if have_data:
        x_lo, x_scale, y_lo, y_scale = chart_transform(xs, ys)

    # axes
    parts.append(
        f'<line x1="{MARGIN_L:.2f}" y1="{x_axis_y:.2f}" x2="{CHART_W - MARGIN_R:.2f}" '
        f'y2="{x_axis_y:.2f}" stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_L:.2f}" y1="{MARGIN_T:.2f}" x2="{MARGIN_L:.2f}" '
        f'y2="{x_axis_y:.2f}" stroke="black" stroke-width="1"/>'
    )
    if title:
        parts.append(
            f'<text x="{CHART_W / 2:.2f}" y="14" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{escape(title)}</text>'
        )
    if x_label:
        parts.append(
            f'<text x="{MARGIN_L + plot_w / 2:.2f}" y="{CHART_H - 8:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{escape(x_label)}</text>'
        )
    if y_label:
        y_mid = MARGIN_T + plot_h / 2
        parts.append(
            f'<text x="14" y="{y_mid:.2f}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11" transform="rotate(-90 14 {y_mid:.2f})">{escape(y_label)}</text>'
        )

    if have_data:
        # five ticks per axis
        for t in range(5):
            frac = t / 4.0
            px = MARGIN_L + frac * plot_w
            py = x_axis_y - frac * plot_h
            xv = x_lo + frac * (plot_w / x_scale)
            yv = y_lo + frac * (plot_h / y_scale)
            parts.append(
                f'<line x1="{px:.2f}" y1="{x_axis_y:.2f}" x2="{px:.2f}" y2="{x_axis_y + 4:.2f}" '
                f'stroke="black" stroke-width="1"/>'
            )
            parts.append(
                f'<text x="{px:.2f}" y="{x_axis_y + 16:.2f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{xv:.4g}</text>'
            )
            parts.append(
                f'<line x1="{MARGIN_L - 4:.2f}" y1="{py:.2f}" x2="{MARGIN_L:.2f}" y2="{py:.2f}" '
                f'stroke="black" stroke-width="1"/>'
            )
            parts.append(
                f'<text x="{MARGIN_L - 7:.2f}" y="{py + 3:.2f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="10">{yv:.4g}</text>'
            )
        for idx, name in enumerate(series):
            pts = series[name]
            if not pts:
                continue
            color = PALETTE[idx % len(PALETTE)]
            coords = " ".join(
                f"{MARGIN_L + (x - x_lo) * x_scale:.2f},{x_axis_y - (y - y_lo) * y_scale:.2f}"
                for x, y in pts
            )
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
            ly = MARGIN_T + 14 + 14 * idx
            lx = CHART_W - MARGIN_R - 130
            parts.append(
                f'<line x1="{lx:.2f}" y1="{ly - 4:.2f}" x2="{lx + 18:.2f}" y2="{ly - 4:.2f}" '
                f'stroke="{color}" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{lx + 24:.2f}" y="{ly:.2f}" font-family="sans-serif" '
                f'font-size="10">{escape(str(name))}</text>'
            )

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plot(path: str, series: dict[str, list[tuple[float, float]]], **labels) -> None:
    with open(path, "w") as fh:
        fh.write(svg_line_chart(series, **labels))
