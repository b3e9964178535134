"""Minimal SVG writers for line plots and grid-world overlays.

Output is plain text with fixed number formatting so two runs produce the
same bytes.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def _num(x: float) -> str:
    return f"{x:.2f}"


def line_plot(series: dict[str, np.ndarray], title: str, xlabel: str, ylabel: str,
              log_y: bool = False, width: int = 640, height: int = 400) -> str:
    """One polyline per named series against its index."""
    margin = 60
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    if log_y:
        ys = {k: np.log10(np.maximum(v, 1e-300)) for k, v in ys.items()}
    allv = np.concatenate([v for v in ys.values() if len(v)]) if ys else np.zeros(1)
    lo, hi = float(np.min(allv)), float(np.max(allv))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max(max((len(v) for v in ys.values()), default=1), 2)
    pw, ph = width - 2 * margin, height - 2 * margin

    def xy(i, y):
        return margin + pw * i / (n - 1), margin + ph * (1.0 - (y - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<line x1="{margin}" y1="{margin + ph}" x2="{margin + pw}" y2="{margin + ph}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + ph}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="15" y="{height / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {height / 2})">{escape(ylabel + (" (log10)" if log_y else ""))}</text>',
        f'<text x="{margin - 5}" y="{margin + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{margin - 5}" y="{margin + ph + 4}" text-anchor="end" font-size="10">{lo:.3g}</text>',
    ]
    for j, (name, v) in enumerate(ys.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in (xy(i, y) for i, y in enumerate(v)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{margin + pw - 5}" y="{margin + 15 + 15 * j}" text-anchor="end" '
                   f'font-size="12" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def grid_overlay(occupancy: np.ndarray, paths: dict[str, list], start, goal, title: str = "",
                 cell: int = 16) -> str:
    """Occupancy grid with each path drawn through cell centres."""
    h, w = occupancy.shape
    top = 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell + top}" '
        f'viewBox="0 0 {w * cell} {h * cell + top}">',
        f'<rect x="0" y="0" width="{w * cell}" height="{h * cell + top}" fill="white"/>',
        f'<text x="{w * cell / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for r, c in zip(*np.nonzero(occupancy)):
        out.append(f'<rect x="{c * cell}" y="{top + r * cell}" width="{cell}" height="{cell}" fill="#444"/>')

    def centre(rc):
        return f"{_num((rc[1] + 0.5) * cell)},{_num(top + (rc[0] + 0.5) * cell)}"

    for j, (name, path) in enumerate(paths.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(centre(rc) for rc in path)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="3" stroke-opacity="0.8" '
                   f'points="{pts}"><title>{escape(name)}</title></polyline>')
    for rc, color in ((start, "#2ca02c"), (goal, "#d62728")):
        x, y = centre(rc).split(",")
        out.append(f'<circle cx="{x}" cy="{y}" r="{cell / 3}" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
