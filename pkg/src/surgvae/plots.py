"""Minimal SVG line and scatter plots (no raster or plotting dependencies)."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
W, H, PAD = 420, 360, 48


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{PAD}" y="{PAD / 2}" width="{W - 1.5 * PAD}" height="{H - 1.5 * PAD}" fill="none" stroke="black"/>',
        f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="12" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {H / 2})">{escape(ylabel)}</text>',
    ]


def _mapper(xlim, ylim):
    x0, x1 = xlim
    y0, y1 = ylim
    sx = (W - 1.5 * PAD) / ((x1 - x0) or 1.0)
    sy = (H - 1.5 * PAD) / ((y1 - y0) or 1.0)
    return lambda x, y: (PAD + (x - x0) * sx, H - PAD + (y0 - y) * sy)


def _ticks(lines, xlim, ylim, to_px):
    for i in range(5):
        fx = xlim[0] + (xlim[1] - xlim[0]) * i / 4
        fy = ylim[0] + (ylim[1] - ylim[0]) * i / 4
        px, _ = to_px(fx, ylim[0])
        _, py = to_px(xlim[0], fy)
        lines.append(f'<text x="{px:.1f}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{fx:.2f}</text>')
        lines.append(f'<text x="{PAD - 4}" y="{py + 3:.1f}" text-anchor="end" font-size="10">{fy:.2f}</text>')


def line_plot(path, series, title="", xlabel="", ylabel="", xlim=(0.0, 1.0), ylim=(0.0, 1.0), diagonal=False):
    """``series`` is a list of (label, xs, ys)."""
    to_px = _mapper(xlim, ylim)
    lines = _frame(title, xlabel, ylabel)
    _ticks(lines, xlim, ylim, to_px)
    if diagonal:
        (ax, ay), (bx, by) = to_px(xlim[0], ylim[0]), to_px(xlim[1], ylim[1])
        lines.append(f'<line x1="{ax:.1f}" y1="{ay:.1f}" x2="{bx:.1f}" y2="{by:.1f}" stroke="#999" '
                     'stroke-dasharray="4 3"/>')
    for i, (label, xs, ys) in enumerate(series):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join("{:.2f},{:.2f}".format(*to_px(x, y)) for x, y in zip(xs, ys))
        lines.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        lines.append(f'<text x="{W - PAD / 2 - 4}" y="{PAD / 2 + 14 + 13 * i}" text-anchor="end" font-size="10" '
                     f'fill="{colour}">{escape(str(label))}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def scatter_plot(path, xy, labels, title="", xlabel="dim1", ylabel="dim2"):
    xy = np.asarray(xy, dtype=float)
    labels = np.asarray(labels)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    to_px = _mapper((lo[0], hi[0]), (lo[1], hi[1]))
    lines = _frame(title, xlabel, ylabel)
    _ticks(lines, (lo[0], hi[0]), (lo[1], hi[1]), to_px)
    kinds = sorted(set(labels.tolist()))
    for i, kind in enumerate(kinds):
        colour = PALETTE[i % len(PALETTE)]
        for x, y in xy[labels == kind]:
            px, py = to_px(x, y)
            lines.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.8" fill="{colour}" fill-opacity="0.7"/>')
        lines.append(f'<text x="{W - PAD / 2 - 4}" y="{PAD / 2 + 14 + 13 * i}" text-anchor="end" font-size="10" '
                     f'fill="{colour}">{escape(str(kind))}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
