"""Dependency-free SVG emitters for the direction field and scaling curves."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    defs = ('<defs><marker id="tip" markerWidth="6" markerHeight="6" refX="5" refY="3" '
            'orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="#333"/></marker></defs>')
    return "\n".join([head, defs, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def quiver_svg(points: np.ndarray, dirs: np.ndarray, bounds, values: np.ndarray | None = None,
               target: np.ndarray | None = None, size: int = 480, margin: int = 30) -> str:
    """Arrows of fixed length at ``points`` (world units) pointing along ``dirs``."""
    (x0, x1), (y0, y1) = bounds
    span = max(x1 - x0, y1 - y0) or 1.0
    scale = (size - 2 * margin) / span

    def tx(x, y):
        return margin + (x - x0) * scale, size - margin - (y - y0) * scale

    n_side = max(1, int(round(np.sqrt(len(points)))))
    arrow = 0.8 * (size - 2 * margin) / max(n_side, 2) / 2
    body = []
    if values is not None and len(values):
        lo, hi = float(np.min(values)), float(np.max(values))
    for i, (p, d) in enumerate(zip(points, dirs)):
        sx, sy = tx(*p)
        ex, ey = sx + arrow * d[0], sy - arrow * d[1]
        color = "#333"
        if values is not None and hi > lo:
            t = (values[i] - lo) / (hi - lo)
            color = f"rgb({int(255 * (1 - t))},{int(80 + 100 * t)},{int(255 * t)})"
        body.append(f'<line x1="{sx:.2f}" y1="{sy:.2f}" x2="{ex:.2f}" y2="{ey:.2f}" '
                    f'stroke="{color}" stroke-width="1.5" marker-end="url(#tip)"/>')
    if target is not None:
        cx, cy = tx(*target)
        body.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="5" fill="none" stroke="#d62728" stroke-width="2"/>')
    return _svg(size, size, body)


def line_plot_svg(series: dict, xlabel: str, ylabel: str, width: int = 520, height: int = 360,
                  margin: int = 50, y_range=(0.0, 1.0)) -> str:
    """One polyline per named series of ``(x, y)`` points."""
    xs = [x for pts in series.values() for x, _ in pts]
    if not xs:
        return _svg(width, height, [])
    xa, xb = min(xs), max(xs)
    if xb == xa:
        xb = xa + 1
    ya, yb = y_range

    def tx(x, y):
        return (margin + (x - xa) / (xb - xa) * (width - 2 * margin),
                height - margin - (y - ya) / (yb - ya) * (height - 2 * margin))

    body = [f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
            f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
            f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" '
            f'text-anchor="middle">{escape(ylabel)}</text>']
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in (tx(x, y) for x, y in pts))
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            cx, cy = tx(x, y)
            body.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}"/>')
        body.append(f'<text x="{width - margin - 120}" y="{margin + 16 * i}" fill="{color}">{escape(name)}</text>')
    return _svg(width, height, body)
