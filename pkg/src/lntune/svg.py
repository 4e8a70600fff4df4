"""Minimal deterministic SVG heat maps (white -> dark blue)."""

from __future__ import annotations

from html import escape
from typing import Sequence

CELL = 28
LABEL_W = 190
HEADER_H = 24


def _colour(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    r = round(255 * (1 - t) + 8 * t)
    g = round(255 * (1 - t) + 48 * t)
    b = round(255 * (1 - t) + 107 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(row_labels: Sequence[str], col_labels: Sequence[str],
                values: Sequence[Sequence[float]], title: str = "") -> str:
    flat = [v for row in values for v in row]
    lo, hi = (min(flat), max(flat)) if flat else (0.0, 0.0)
    span = hi - lo if hi > lo else 1.0
    width = LABEL_W + CELL * len(col_labels) + 10
    height = HEADER_H * 2 + CELL * len(row_labels) + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="10">']
    if title:
        out.append(f'<text x="4" y="14">{escape(title)}</text>')
    for j, label in enumerate(col_labels):
        x = LABEL_W + j * CELL + CELL // 2
        out.append(f'<text x="{x}" y="{HEADER_H * 2 - 4}" text-anchor="middle">{escape(str(label))}</text>')
    for i, label in enumerate(row_labels):
        y = HEADER_H * 2 + i * CELL
        out.append(f'<text x="4" y="{y + CELL // 2 + 3}">{escape(str(label))}</text>')
        for j, v in enumerate(values[i]):
            x = LABEL_W + j * CELL
            out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                       f'fill="{_colour((v - lo) / span)}"><title>{v:.6g}</title></rect>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
