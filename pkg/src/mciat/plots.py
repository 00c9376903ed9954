"""Tiny SVG writers: line chart, scatter and bar chart. No plotting dependency."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 320, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _scale(values, lo_px, hi_px):
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi, lambda x: lo_px + (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * (hi_px - lo_px)


def _frame(title, xlabel, ylabel, xr, yr) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD / 2}" y2="{HEIGHT - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD / 2}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
        f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="12" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {HEIGHT / 2:.1f})">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{HEIGHT - PAD + 14}" font-size="9">{xr[0]:.3g}</text>',
        f'<text x="{WIDTH - PAD / 2}" y="{HEIGHT - PAD + 14}" text-anchor="end" font-size="9">{xr[1]:.3g}</text>',
        f'<text x="{PAD - 4}" y="{HEIGHT - PAD}" text-anchor="end" font-size="9">{yr[0]:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD / 2 + 8}" text-anchor="end" font-size="9">{yr[1]:.3g}</text>',
    ]


def _write(path, parts) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts + ["</svg>"]) + "\n")
    return path


def line_chart(path, series: dict[str, tuple], title="", xlabel="", ylabel="") -> Path:
    """``series`` maps a legend label to ``(x, y)``."""
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    x0, x1, fx = _scale(xs, PAD, WIDTH - PAD / 2)
    y0, y1, fy = _scale(ys, HEIGHT - PAD, PAD / 2)
    parts = _frame(title, xlabel, ylabel, (x0, x1), (y0, y1))
    for i, (label, (x, y)) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(fx(x), fy(y)) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{WIDTH - PAD}" y="{PAD / 2 + 14 * (i + 1)}" text-anchor="end" font-size="10" '
            f'fill="{colour}">{escape(label)}</text>'
        )
    return _write(path, parts)


def scatter(path, x, y, groups, title="", xlabel="", ylabel="") -> Path:
    x0, x1, fx = _scale(x, PAD, WIDTH - PAD / 2)
    y0, y1, fy = _scale(y, HEIGHT - PAD, PAD / 2)
    parts = _frame(title, xlabel, ylabel, (x0, x1), (y0, y1))
    groups = np.asarray(groups)
    for i, g in enumerate(sorted(set(groups.tolist()))):
        colour = PALETTE[i % len(PALETTE)]
        sel = groups == g
        for a, b in zip(fx(np.asarray(x)[sel]), fy(np.asarray(y)[sel])):
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{colour}" fill-opacity="0.7"/>')
        parts.append(
            f'<text x="{WIDTH - PAD}" y="{PAD / 2 + 14 * (i + 1)}" text-anchor="end" font-size="10" '
            f'fill="{colour}">{escape(str(g))}</text>'
        )
    return _write(path, parts)


def bar_chart(path, heights, title="", xlabel="", ylabel="") -> Path:
    h = np.asarray(heights, dtype=np.float64)
    top = float(h.max()) if h.size and h.max() > 0 else 1.0
    parts = _frame(title, xlabel, ylabel, (0, len(h)), (0, top))
    width = (WIDTH - 1.5 * PAD) / max(len(h), 1)
    for i, v in enumerate(h):
        bh = v / top * (HEIGHT - 1.5 * PAD)
        parts.append(
            f'<rect x="{PAD + i * width:.2f}" y="{HEIGHT - PAD - bh:.2f}" width="{max(width - 0.5, 0.5):.2f}" '
            f'height="{bh:.2f}" fill="{PALETTE[0]}"/>'
        )
    return _write(path, parts)
