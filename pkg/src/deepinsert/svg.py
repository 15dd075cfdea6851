"""Minimal deterministic SVG plots: line charts and heatmaps.

Hand-rolled so regenerated artifacts are byte-identical for identical data,
which the reproducibility contract requires (plot libraries embed unstable
ids and timestamps).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

_PALETTE = [
    (68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37),
]

_SERIES_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _f(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def _color(v: float) -> str:
    v = min(1.0, max(0.0, v))
    pos = v * (len(_PALETTE) - 1)
    i = min(int(pos), len(_PALETTE) - 2)
    t = pos - i
    rgb = [round(_PALETTE[i][c] * (1 - t) + _PALETTE[i + 1][c] * t) for c in range(3)]
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def line_plot(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    x_label: str,
    y_label: str,
    width: int = 640,
    height: int = 400,
) -> str:
    """Overlayed polylines; ``series`` is a list of (label, xs, ys)."""
    pad = 56
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("line_plot needs at least one point")
    x_min, x_max = min(xs_all), max(xs_all)
    y_min, y_max = min(ys_all), max(ys_all)
    x_span = (x_max - x_min) or 1.0
    y_span = (y_max - y_min) or 1.0

    def sx(x: float) -> float:
        return pad + (x - x_min) / x_span * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y_min) / y_span * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" font-size="11">{x_label}</text>',
        f'<text x="14" y="{height // 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {height // 2})">{y_label}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{_f(x_min)}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{_f(x_max)}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{_f(y_min)}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{_f(y_max)}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        color = _SERIES_COLORS[i % len(_SERIES_COLORS)]
        points = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="2.5" fill="{color}"/>')
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap(
    matrix: np.ndarray,
    title: str,
    x_label: str,
    y_label: str,
    cell: int = 18,
) -> str:
    """Color grid of a 2-D matrix, normalized to its own range."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows, cols = matrix.shape
    pad = 48
    width = pad * 2 + cols * cell
    height = pad * 2 + rows * cell
    lo, hi = float(matrix.min()), float(matrix.max())
    span = (hi - lo) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{width // 2}" y="{height - 6}" text-anchor="middle" font-size="10">{x_label}</text>',
        f'<text x="12" y="{height // 2}" text-anchor="middle" font-size="10" '
        f'transform="rotate(-90 12 {height // 2})">{y_label}</text>',
    ]
    for r in range(rows):
        for c in range(cols):
            color = _color((matrix[r, c] - lo) / span)
            parts.append(
                f'<rect x="{pad + c * cell}" y="{pad + r * cell}" '
                f'width="{cell}" height="{cell}" fill="{color}"/>'
            )
    parts.append(
        f'<text x="{pad}" y="{pad - 4}" font-size="9">range [{_f(lo)}, {_f(hi)}]</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
