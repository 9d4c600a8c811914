"""Minimal polyline SVG plots for loss curves."""

from __future__ import annotations

import math
from typing import Dict, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")


def line_plot(
    series: Dict[str, Tuple[Sequence[float], Sequence[float]]],
    title: str = "",
    xlabel: str = "iteration",
    ylabel: str = "loss",
    log_y: bool = False,
    width: int = 640,
    height: int = 360,
    marker: Optional[Tuple[float, str]] = None,
) -> str:
    """Render named (x, y) series as an SVG document string.

    ``marker`` draws a vertical line at x with a text label (used for the
    divergence point).  Non-finite or, with ``log_y``, non-positive points
    are dropped.
    """
    left, right, top, bottom = 64, 16, 32, 44
    pw, ph = width - left - right, height - top - bottom

    def ty(v):
        return math.log10(v) if log_y else v

    pts = {}
    for name, (xs, ys) in series.items():
        keep = [(float(x), ty(float(y))) for x, y in zip(xs, ys) if math.isfinite(y) and (not log_y or y > 0)]
        pts[name] = keep
    allp = [p for v in pts.values() for p in v]
    if allp:
        x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
        y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel + (" (log10)" if log_y else ""))}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        out.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.3g}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{xv:.0f}</text>')
    for k, (name, p) in enumerate(pts.items()):
        color = PALETTE[k % len(PALETTE)]
        if p:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{coords}"/>')
        out.append(f'<text x="{left + 8}" y="{top + 14 + 14 * k}" font-family="sans-serif" font-size="11" fill="{color}">{escape(name)}</text>')
    if marker is not None and x0 <= marker[0] <= x1:
        mx = sx(marker[0])
        out.append(f'<line x1="{mx:.2f}" y1="{top}" x2="{mx:.2f}" y2="{top + ph}" stroke="black" stroke-dasharray="4,3"/>')
        out.append(f'<text x="{mx + 4:.2f}" y="{top + ph - 6}" font-family="sans-serif" font-size="12">{escape(marker[1])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def loss_curve_svgs(record) -> Dict[str, str]:
    """Two plots per run: regression vs weighted classification, and raw classification."""
    rows = [r for r in record.rows if not r.skipped]
    t = [r.t for r in rows]
    marker = (float(record.diverged_at), "X diverged") if record.diverged and record.diverged_at is not None else None
    balance = line_plot(
        {"L_reg": (t, [r.L_reg for r in rows]), "w*L_cls": (t, [r.L_cls_weighted for r in rows])},
        title="regression vs weighted classification loss",
        log_y=True,
        marker=marker,
    )
    raw = line_plot({"L_cls": (t, [r.L_cls_raw for r in rows])}, title="raw classification loss", log_y=True, marker=marker)
    return {"loss_balance.svg": balance, "loss_cls.svg": raw}
