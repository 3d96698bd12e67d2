"""Self-contained SVG plot files with the plotted data embedded as JSON.

Hand-rolled on purpose: the plot files are part of the artifact contract
and should not change shape under a plotting-library upgrade. The figures
carry their full data table inside a ``<desc>`` element.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .data import atomic_write_text

_PALETTE = ("#4878cf", "#9e9e9e", "#d65f5f", "#6acc65", "#956cb4", "#c4ad66")


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg_doc(width: int, height: int, title: str, data: dict, body: list[str]) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f"<title>{_esc(title)}</title>",
        f"<desc>{_esc(json.dumps(data, sort_keys=True))}</desc>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def embedded_data(path: str | Path) -> dict:
    """Read back the JSON data table embedded in a plot produced here."""
    text = Path(path).read_text(encoding="utf-8")
    start = text.index("<desc>") + len("<desc>")
    end = text.index("</desc>")
    raw = text[start:end]
    for entity, char in (("&lt;", "<"), ("&gt;", ">"), ("&amp;", "&")):
        raw = raw.replace(entity, char)
    return json.loads(raw)


def scatter_svg(
    path: str | Path,
    points: Sequence[Sequence[float]],
    groups: Sequence[str],
    title: str,
    extra: dict | None = None,
) -> None:
    """2-D scatter colored by group label."""
    if len(points) != len(groups):
        raise ValueError(f"{len(points)} points but {len(groups)} group labels")
    width, height, margin = 640, 480, 50
    xs = [float(p[0]) for p in points]
    ys = [float(p[1]) for p in points]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x: float) -> float:
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y: float) -> float:
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    order = sorted(set(groups))
    color = {g: _PALETTE[i % len(_PALETTE)] for i, g in enumerate(order)}
    body = [
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="#444"/>'
    ]
    for (x, y), g in zip(points, groups):
        body.append(
            f'<circle cx="{sx(float(x)):.2f}" cy="{sy(float(y)):.2f}" r="2.5" '
            f'fill="{color[g]}" fill-opacity="0.6"/>'
        )
    for i, g in enumerate(order):
        y = margin + 16 * i + 12
        body.append(f'<circle cx="{width - margin + 14}" cy="{y}" r="4" fill="{color[g]}"/>')
        body.append(
            f'<text x="{width - margin + 22}" y="{y + 4}" font-size="10">{_esc(g)}</text>'
        )
    data = {"points": [[float(p[0]), float(p[1])] for p in points], "groups": list(groups)}
    if extra:
        data.update(extra)
    atomic_write_text(Path(path), _svg_doc(width, height, title, data, body))


def heatmap_svg(
    path: str | Path,
    matrix: Sequence[Sequence[float]],
    labels: Sequence[str],
    title: str,
    extra: dict | None = None,
    vmin: float = -1.0,
    vmax: float = 1.0,
) -> None:
    """Square heatmap with numeric cell annotations (agreement matrices)."""
    n = len(matrix)
    if any(len(row) != n for row in matrix) or len(labels) != n:
        raise ValueError("heatmap needs a square matrix with one label per row")
    cell, margin_left, margin_top = 64, 110, 50
    width = margin_left + n * cell + 30
    height = margin_top + n * cell + 40

    def shade(v: float) -> str:
        t = (float(v) - vmin) / (vmax - vmin or 1.0)
        t = min(max(t, 0.0), 1.0)
        r = int(255 * (1.0 - t) + 70 * t)
        g = int(80 * (1.0 - t) + 120 * t)
        b = int(80 * (1.0 - t) + 207 * t)
        return f"rgb({r},{g},{b})"

    body = []
    for i, row in enumerate(matrix):
        for j, value in enumerate(row):
            x = margin_left + j * cell
            y = margin_top + i * cell
            body.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{shade(value)}" stroke="white"/>'
            )
            body.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                f'font-size="11" fill="white">{float(value):.3f}</text>'
            )
    for i, label in enumerate(labels):
        body.append(
            f'<text x="{margin_left - 6}" y="{margin_top + i * cell + cell / 2 + 4}" '
            f'text-anchor="end" font-size="11">{_esc(label)}</text>'
        )
        body.append(
            f'<text x="{margin_left + i * cell + cell / 2}" y="{margin_top - 8}" '
            f'text-anchor="middle" font-size="11">{_esc(label)}</text>'
        )
    data = {"matrix": [[float(v) for v in row] for row in matrix], "labels": list(labels)}
    if extra:
        data.update(extra)
    atomic_write_text(Path(path), _svg_doc(width, height, title, data, body))
