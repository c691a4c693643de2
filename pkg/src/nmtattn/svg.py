"""Dependency-free SVG heatmaps and bar charts.

Output is a pure function of the inputs: fixed number formatting, no
timestamps and no random ids, so reruns are byte-identical.

Colour scales: ``sequential`` maps [vmin, vmax] from white to dark blue
(attention weights); ``diverging`` maps [-1, 1] from blue through white to
red (cosine similarity).
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

CELL = 28
LABEL_W = 80
LABEL_H = 80
FONT = 11
STYLES = ("sequential", "diverging")


def _hex(rgb) -> str:
    return "#" + "".join(f"{int(round(min(max(c, 0.0), 1.0) * 255)):02x}" for c in rgb)


def _lerp(a, b, f):
    return tuple(x + (y - x) * f for x, y in zip(a, b))


WHITE = (1.0, 1.0, 1.0)
BLUE = (0.03, 0.19, 0.42)
RED = (0.70, 0.09, 0.17)


def color(value: float, style: str, vmin: float = 0.0, vmax: float = 1.0) -> str:
    if style == "sequential":
        f = 0.0 if vmax <= vmin else (value - vmin) / (vmax - vmin)
        return _hex(_lerp(WHITE, BLUE, min(max(f, 0.0), 1.0)))
    if style == "diverging":
        f = min(max(value, -1.0), 1.0)
        return _hex(_lerp(WHITE, RED, f) if f >= 0 else _lerp(WHITE, BLUE, -f))
    raise ValueError(f"style must be one of {STYLES}")


def _num(x: float) -> str:
    return f"{x:.2f}"


def heatmap(matrix, row_labels: Sequence[str], col_labels: Sequence[str],
            style: str = "sequential", title: str = "", annotate: bool = True) -> str:
    """Render a matrix as an SVG heatmap; rows top to bottom, columns left to right."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("matrix must be a nonempty 2-D array")
    if len(row_labels) != m.shape[0] or len(col_labels) != m.shape[1]:
        raise ValueError("one label per row and per column is required")
    if not np.isfinite(m).all():
        raise ValueError("matrix must be finite")
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}")
    vmin, vmax = (0.0, max(1.0, float(m.max()))) if style == "sequential" else (-1.0, 1.0)
    rows, cols = m.shape
    top = LABEL_H + (20 if title else 0)
    width = LABEL_W + cols * CELL + 10
    height = top + rows * CELL + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="{FONT}">']
    if title:
        out.append(f'<text x="{width // 2}" y="14" text-anchor="middle">{escape(title)}</text>')
    for j, lab in enumerate(col_labels):
        x = LABEL_W + j * CELL + CELL // 2
        out.append(f'<text class="col" x="{x}" y="{top - 6}" transform="rotate(-60 {x} {top - 6})">'
                   f'{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        y = top + i * CELL + CELL // 2 + FONT // 3
        out.append(f'<text class="row" x="{LABEL_W - 6}" y="{y}" text-anchor="end">'
                   f'{escape(str(lab))}</text>')
        for j in range(cols):
            v = float(m[i, j])
            x = LABEL_W + j * CELL
            yy = top + i * CELL
            out.append(f'<rect x="{x}" y="{yy}" width="{CELL}" height="{CELL}" '
                       f'fill="{color(v, style, vmin, vmax)}" stroke="#cccccc">'
                       f'<title>{_num(v)}</title></rect>')
            if annotate:
                dark = abs(v - vmin) / (vmax - vmin) > 0.6 if style == "sequential" else abs(v) > 0.6
                out.append(f'<text x="{x + CELL // 2}" y="{yy + CELL // 2 + FONT // 3}" '
                           f'text-anchor="middle" font-size="8" '
                           f'fill="{"#ffffff" if dark else "#000000"}">{_num(v)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: Sequence[float], labels: Sequence[str], title: str = "",
              bar_color: str = "#3b6ea5") -> str:
    """Vertical bars scaled to the largest absolute value; negative bars hang below the axis."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0 or len(labels) != v.size:
        raise ValueError("need one label per value and at least one value")
    if not np.isfinite(v).all():
        raise ValueError("values must be finite")
    scale = float(np.abs(v).max()) or 1.0
    plot_h = 120
    top = 20 if title else 6
    width = LABEL_W + v.size * CELL + 10
    axis = top + (plot_h if (v >= 0).all() else plot_h // 2)
    half = plot_h if (v >= 0).all() else plot_h // 2
    height = top + plot_h + LABEL_H
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="{FONT}">']
    if title:
        out.append(f'<text x="{width // 2}" y="14" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<line x1="{LABEL_W}" y1="{axis}" x2="{width - 10}" y2="{axis}" stroke="#000000"/>')
    for i, (val, lab) in enumerate(zip(v, labels)):
        h = abs(val) / scale * half
        x = LABEL_W + i * CELL + 4
        y = axis - h if val >= 0 else axis
        out.append(f'<rect x="{x}" y="{_num(y)}" width="{CELL - 8}" height="{_num(h)}" '
                   f'fill="{bar_color}"><title>{_num(float(val))}</title></rect>')
        lx = LABEL_W + i * CELL + CELL // 2
        ly = top + plot_h + 8
        out.append(f'<text class="col" x="{lx}" y="{ly}" transform="rotate(60 {lx} {ly})">'
                   f'{escape(str(lab))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
