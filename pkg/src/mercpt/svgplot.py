"""Tiny standalone SVG line plotter for loss curves and scaling fits."""
from __future__ import annotations

import math
from html import escape
from pathlib import Path

PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#000000", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot(
    series: dict[str, tuple[list[float], list[float]]],
    path: str | Path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logx: bool = False,
    markers: dict[str, tuple[list[float], list[float]]] | None = None,
    width: int = 640,
    height: int = 420,
) -> None:
    """Write ``series`` (label -> (xs, ys)) as polylines; ``markers`` are drawn as dots."""
    markers = markers or {}
    fx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    xs = [fx(x) for xs_, _ in list(series.values()) + list(markers.values()) for x in xs_]
    ys = [y for _, ys_ in list(series.values()) + list(markers.values()) for y in ys_ if math.isfinite(y)]
    if not xs or not ys:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (fx(x) - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2 - right / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for t in _ticks(x0, x1):
        x = left + (t - x0) / (x1 - x0) * pw
        label = f"{10 ** t:.3g}" if logx else f"{t:.4g}"
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{label}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    labels = list(dict.fromkeys(list(series) + list(markers)))
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        if label in series:
            pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(*series[label]) if math.isfinite(y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        for x, y in zip(*markers.get(label, ((), ()))):
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 * i + 8
        out.append(f'<rect x="{left + pw + 10}" y="{ly - 7}" width="10" height="8" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 24}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))
