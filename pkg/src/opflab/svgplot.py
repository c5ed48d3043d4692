"""Minimal SVG line and scatter charts.

Coordinates are printed with fixed precision so identical data yields
identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")

W, H = 640, 400
M_LEFT, M_RIGHT, M_TOP, M_BOTTOM = 70, 150, 40, 50


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def chart(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], title: str, xlabel: str, ylabel: str,
          scatter: bool = False) -> str:
    """Render named ``(xs, ys)`` series as one SVG document."""
    pts = [(np.asarray(x, dtype=float), np.asarray(y, dtype=float)) for x, y in series.values()]
    allx = np.concatenate([p[0] for p in pts]) if pts else np.zeros(1)
    ally = np.concatenate([p[1] for p in pts]) if pts else np.zeros(1)
    finite = np.isfinite(allx) & np.isfinite(ally)
    if not finite.any():
        allx, ally = np.zeros(1), np.zeros(1)
    else:
        allx, ally = allx[finite], ally[finite]
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - M_LEFT - M_RIGHT, H - M_TOP - M_BOTTOM

    def sx(v):
        return M_LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return M_TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{M_LEFT}" y="{M_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{M_TOP + ph}" x2="{sx(t):.2f}" y2="{M_TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{M_TOP + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{M_LEFT - 4}" y1="{sy(t):.2f}" x2="{M_LEFT}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{M_LEFT - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{M_LEFT + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{M_TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {M_TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, (xs, ys)) in enumerate(zip(series.keys(), pts)):
        color = PALETTE[k % len(PALETTE)]
        ok = np.isfinite(xs) & np.isfinite(ys)
        coords = [(sx(a), sy(b)) for a, b in zip(xs[ok], ys[ok])]
        if scatter:
            for cx, cy in coords:
                out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}"/>')
        elif coords:
            path = " ".join(f"{cx:.2f},{cy:.2f}" for cx, cy in coords)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = M_TOP + 14 * k + 8
        out.append(f'<rect x="{W - M_RIGHT + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - M_RIGHT + 24}" y="{ly + 1}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path: Union[str, Path], *args, **kwargs) -> Path:
    path = Path(path)
    path.write_text(chart(*args, **kwargs), encoding="utf-8")
    return path
