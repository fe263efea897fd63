"""Dependency-free SVG emitters for sample scatters and metric curves."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_POS_COLOR = "#3a6ea5"
_NEG_COLOR = "#8b4513"  # infracting samples drawn in brown
_SIZE = 480
_MARGIN = 48


def _svg_header(width, height, title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]


def scatter_svg(path, points: np.ndarray, infracting: np.ndarray,
                extent: float = 3.0, title: str = "samples") -> None:
    """2-D scatter; oracle-violating points are shown in brown."""
    points = np.asarray(points)
    infracting = np.asarray(infracting, dtype=bool)
    w = h = _SIZE

    def sx(v):
        return _MARGIN + (v + extent) / (2 * extent) * (w - 2 * _MARGIN)

    def sy(v):
        return h - _MARGIN - (v + extent) / (2 * extent) * (h - 2 * _MARGIN)

    parts = _svg_header(w, h, title)
    parts.append(f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{w - 2 * _MARGIN}" '
                 f'height="{h - 2 * _MARGIN}" fill="none" stroke="#999"/>')
    keep = np.all(np.abs(points) <= extent, axis=1)
    for ok_color, mask in ((_POS_COLOR, keep & ~infracting),
                           (_NEG_COLOR, keep & infracting)):
        for x, y in points[mask]:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="1.6" '
                         f'fill="{ok_color}" fill-opacity="0.6"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def line_chart_svg(path, xs, series: dict, title: str = "",
                   ylabel: str = "") -> None:
    """Metric-vs-iteration lines with optional stderr whiskers.

    ``series`` maps a label to ``(values, stderrs_or_None, color)``.
    """
    xs = np.asarray(xs, dtype=float)
    w, h = _SIZE, int(_SIZE * 0.75)
    lo = min(np.min(np.asarray(v) - (np.asarray(e) if e is not None else 0))
             for v, e, _ in series.values())
    hi = max(np.max(np.asarray(v) + (np.asarray(e) if e is not None else 0))
             for v, e, _ in series.values())
    pad = 0.05 * (hi - lo) if hi > lo else max(abs(hi), 1e-9) * 0.1
    lo, hi = lo - pad, hi + pad
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    span = x1 - x0 if x1 > x0 else 1.0

    def sx(v):
        return _MARGIN + (v - x0) / span * (w - 2 * _MARGIN)

    def sy(v):
        return h - _MARGIN - (v - lo) / (hi - lo) * (h - 2 * _MARGIN)

    parts = _svg_header(w, h, title)
    parts.append(f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{w - 2 * _MARGIN}" '
                 f'height="{h - 2 * _MARGIN}" fill="none" stroke="#999"/>')
    parts.append(f'<text x="14" y="{h / 2}" text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12" transform="rotate(-90 14 {h / 2})">{ylabel}</text>')
    for tick in np.linspace(lo, hi, 5):
        parts.append(f'<text x="{_MARGIN - 6}" y="{sy(tick):.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{tick:.3g}</text>')
    for tick in xs:
        parts.append(f'<text x="{sx(tick):.1f}" y="{h - _MARGIN + 14}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{tick:g}</text>')
    y_leg = _MARGIN + 4
    for label, (vals, errs, color) in series.items():
        vals = np.asarray(vals, dtype=float)
        pts = " ".join(f"{sx(x):.1f},{sy(v):.1f}" for x, v in zip(xs, vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, v in zip(xs, vals):
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(v):.1f}" r="2.5" fill="{color}"/>')
        if errs is not None:
            for x, v, e in zip(xs, vals, np.asarray(errs, dtype=float)):
                parts.append(f'<line x1="{sx(x):.1f}" y1="{sy(v - e):.1f}" '
                             f'x2="{sx(x):.1f}" y2="{sy(v + e):.1f}" '
                             f'stroke="{color}" stroke-width="1"/>')
        parts.append(f'<text x="{w - _MARGIN - 4}" y="{y_leg + 10}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11" fill="{color}">{label}</text>')
        y_leg += 14
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
