"""Minimal SVG renderers for report output (no plotting dependency).

Two chart types cover the tabular outputs: a cell heatmap for matrices
(cosine by model x activity, deviation tables) and grouped bars for metric
comparisons (drift by shift x estimator).  Figures are plain strings built
here and written atomically by the caller.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

CELL = 64
PAD_LEFT = 150
PAD_TOP = 60
FONT = "font-family='sans-serif' font-size='12'"


def _color(value: float, vmin: float, vmax: float) -> str:
    """Blue (low) -> white (mid) -> red (high) diverging ramp."""
    if vmax <= vmin:
        t = 0.5
    else:
        t = (value - vmin) / (vmax - vmin)
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        u = t / 0.5
        r, g, b = int(60 + 195 * u), int(90 + 165 * u), 255
    else:
        u = (t - 0.5) / 0.5
        r, g, b = 255, int(255 - 165 * u), int(255 - 195 * u)
    return f"rgb({r},{g},{b})"


def heatmap_svg(matrix, row_labels, col_labels, title: str = "") -> str:
    rows = len(row_labels)
    cols = len(col_labels)
    flat = [v for row in matrix for v in row]
    vmin, vmax = min(flat), max(flat)
    width = PAD_LEFT + cols * CELL + 20
    height = PAD_TOP + rows * CELL + 20
    parts = [
        f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}'>",
        f"<text x='{PAD_LEFT}' y='20' {FONT} font-size='14'>{escape(title)}</text>",
    ]
    for c, lab in enumerate(col_labels):
        x = PAD_LEFT + c * CELL + CELL / 2
        parts.append(
            f"<text x='{x}' y='{PAD_TOP - 8}' {FONT} text-anchor='middle'>{escape(str(lab))}</text>"
        )
    for r, lab in enumerate(row_labels):
        y = PAD_TOP + r * CELL + CELL / 2 + 4
        parts.append(
            f"<text x='{PAD_LEFT - 8}' y='{y}' {FONT} text-anchor='end'>{escape(str(lab))}</text>"
        )
        for c in range(cols):
            v = matrix[r][c]
            x = PAD_LEFT + c * CELL
            y0 = PAD_TOP + r * CELL
            parts.append(
                f"<rect x='{x}' y='{y0}' width='{CELL}' height='{CELL}' "
                f"fill='{_color(v, vmin, vmax)}' stroke='white'/>"
            )
            parts.append(
                f"<text x='{x + CELL / 2}' y='{y0 + CELL / 2 + 4}' {FONT} "
                f"text-anchor='middle'>{v:.3f}</text>"
            )
    parts.append("</svg>")
    return "\n".join(parts)


def grouped_bars_svg(groups, series, values, title: str = "") -> str:
    """values[g][s] bars, one cluster per group, one color per series."""
    palette = ("#4878cf", "#e1812c", "#3a923a", "#c03d3e", "#8172b2")
    bar_w = 28
    gap = 24
    chart_h = 220
    cluster_w = len(series) * bar_w + gap
    width = PAD_LEFT // 2 + len(groups) * cluster_w + 40
    height = PAD_TOP + chart_h + 60
    vmax = max(max(row) for row in values) or 1.0
    parts = [
        f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}'>",
        f"<text x='20' y='20' {FONT} font-size='14'>{escape(title)}</text>",
    ]
    for s, name in enumerate(series):
        lx = 20 + s * 140
        parts.append(
            f"<rect x='{lx}' y='30' width='12' height='12' fill='{palette[s % len(palette)]}'/>"
        )
        parts.append(f"<text x='{lx + 16}' y='41' {FONT}>{escape(str(name))}</text>")
    x0 = 40
    base = PAD_TOP + chart_h
    for g, gname in enumerate(groups):
        cx = x0 + g * cluster_w
        for s in range(len(series)):
            v = values[g][s]
            h = 0 if vmax == 0 else v / vmax * chart_h
            x = cx + s * bar_w
            parts.append(
                f"<rect x='{x}' y='{base - h}' width='{bar_w - 4}' height='{h}' "
                f"fill='{palette[s % len(palette)]}'/>"
            )
            parts.append(
                f"<text x='{x + bar_w / 2}' y='{base - h - 4}' {FONT} font-size='10' "
                f"text-anchor='middle'>{v:.3g}</text>"
            )
        parts.append(
            f"<text x='{cx + (len(series) * bar_w) / 2}' y='{base + 16}' {FONT} "
            f"text-anchor='middle'>{escape(str(gname))}</text>"
        )
    parts.append(f"<line x1='{x0 - 6}' y1='{base}' x2='{width - 20}' y2='{base}' stroke='black'/>")
    parts.append("</svg>")
    return "\n".join(parts)
