"""Standalone SVG line plots of per-slice metrics.

Each SVG embeds its plotted numbers as JSON in a ``<metadata>`` block,
formatted exactly as in ``metrics.csv``.
"""

import json
import math
import os
from xml.sax.saxutils import escape

from ..metrics import fmt_number

WIDTH, HEIGHT = 720, 400
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 170, 40, 55
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
          "#7f7f7f", "#bcbd22", "#17becf")


def nice_ticks(lo, hi, target=5):
    """Round tick positions (1-2-5 steps) covering ``[lo, hi]``."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step + 1e-9) * step
    stop = math.ceil(hi / step - 1e-9) * step
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def _label(v):
    return format(v, "g")


def line_plot_svg(series, title, ylabel, xlabel="slice index z", plot_id="plot"):
    """``series`` is a list of ``(label, xs, ys)``; returns SVG text."""
    all_x = [x for _, xs, _ in series for x in xs] or [0]
    all_y = [y for _, _, ys in series for y in ys if math.isfinite(y)] or [0.0]
    xt = nice_ticks(min(all_x), max(max(all_x), min(all_x) + 1))
    yt = nice_ticks(min(0.0, min(all_y)), max(all_y))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
    pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x):
        return MARGIN_LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph

    meta = {
        "plot": plot_id,
        "x_label": xlabel,
        "y_label": ylabel,
        "series": [{"label": lab, "x": [fmt_number(x) for x in xs], "y": [fmt_number(y) for y in ys]}
                   for lab, xs, ys in series],
    }
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<metadata id="serireg-data"><![CDATA[{json.dumps(meta, sort_keys=True)}]]></metadata>',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<g class="axes" stroke="black" stroke-width="1">'
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP + ph}" x2="{MARGIN_LEFT + pw}" y2="{MARGIN_TOP + ph}"/>'
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{MARGIN_TOP + ph}"/></g>',
    ]
    for t in yt:
        y = py(t)
        out.append(f'<line class="ytick" x1="{MARGIN_LEFT - 5}" y1="{y:.2f}" x2="{MARGIN_LEFT + pw}" '
                   f'y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text class="ytick-label" x="{MARGIN_LEFT - 8}" y="{y + 4:.2f}" '
                   f'text-anchor="end">{_label(t)}</text>')
    for t in xt:
        x = px(t)
        out.append(f'<line class="xtick" x1="{x:.2f}" y1="{MARGIN_TOP + ph}" x2="{x:.2f}" '
                   f'y2="{MARGIN_TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text class="xtick-label" x="{x:.2f}" y="{MARGIN_TOP + ph + 19}" '
                   f'text-anchor="middle">{_label(t)}</text>')
    out.append(f'<text x="{MARGIN_LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(18 {MARGIN_TOP + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for k, (lab, xs, ys) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline class="series" data-label="{escape(lab)}" fill="none" '
                   f'stroke="{color}" stroke-width="1.8" points="{pts}"/>')
        ly = MARGIN_TOP + 10 + 20 * k
        lx = MARGIN_LEFT + pw + 15
        out.append(f'<g class="legend-entry"><line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2.5"/><text x="{lx + 28}" y="{ly + 4}">'
                   f'{escape(lab)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def series_label(rec):
    return rec.method if not rec.strategy else f"{rec.method} ({rec.strategy})"


def emit_plots(records, out_dir, labels=None):
    """Write ``mean_error.svg`` and ``drift.svg``; returns their paths."""
    if not records or not all(r.slices for r in records):
        raise ValueError("need at least one record with at least one slice")
    labels = labels or [series_label(r) for r in records]
    os.makedirs(out_dir, exist_ok=True)
    mean_series, drift_series = [], []
    for lab, rec in zip(labels, records):
        rows = rec.csv_rows()
        zs = [r["z"] for r in rows]
        mean_series.append((lab, zs, [r["mean_px"] for r in rows]))
        drift_series.append((lab, zs, [r["cum_drift_px"] for r in rows]))
    paths = []
    for name, series, title, ylabel in (
        ("mean_error.svg", mean_series, "Per-slice mean geometric error", "mean error (px)"),
        ("drift.svg", drift_series, "Cumulative drift of mean residual", "|cumulative residual| (px)"),
    ):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(line_plot_svg(series, title, ylabel, plot_id=name[:-4]))
        paths.append(path)
    return paths


def read_svg_metadata(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    start = text.index("<![CDATA[") + len("<![CDATA[")
    return json.loads(text[start:text.index("]]>", start)])
