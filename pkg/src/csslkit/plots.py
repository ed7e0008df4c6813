"""Dependency-free SVG charts for density reports and sweep curves.

Output is a pure function of the inputs (fixed number formatting, no
timestamps), so charts are byte-stable across reruns.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 24, 40, 72
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def _y_axis(lo: float, hi: float, label: str) -> list[str]:
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    out = [
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{HEIGHT - MARGIN_B}" stroke="black"/>',
        f'<line x1="{MARGIN_L}" y1="{HEIGHT - MARGIN_B}" x2="{WIDTH - MARGIN_R}" y2="{HEIGHT - MARGIN_B}" stroke="black"/>',
    ]
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        y = HEIGHT - MARGIN_B - plot_h * i / 4
        out.append(f'<text x="{MARGIN_L - 6}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3g}</text>')
        out.append(f'<line x1="{MARGIN_L - 3}" y1="{_fmt(y)}" x2="{MARGIN_L}" y2="{_fmt(y)}" stroke="black"/>')
    out.append(
        f'<text x="14" y="{(MARGIN_T + HEIGHT - MARGIN_B) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(MARGIN_T + HEIGHT - MARGIN_B) / 2})">{escape(label)}</text>'
    )
    return out


def _range(values: Sequence[float]) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    hi = max(finite, default=1.0)
    lo = min(0.0, min(finite, default=0.0))
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str) -> str:
    """Vertical bars, one per label, with rotated category labels."""
    if len(labels) != len(values):
        raise ValueError("labels and values differ in length")
    lo, hi = _range(values)
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    parts = _header(title) + _y_axis(lo, hi, ylabel)
    n = max(len(values), 1)
    slot = plot_w / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        v = v if math.isfinite(v) else 0.0
        h = plot_h * (v - lo) / (hi - lo)
        x = MARGIN_L + slot * i + slot * 0.15
        y = HEIGHT - MARGIN_B - h
        parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(slot * 0.7)}" height="{_fmt(h)}" fill="{PALETTE[0]}"/>'
        )
        cx = MARGIN_L + slot * (i + 0.5)
        ty = HEIGHT - MARGIN_B + 12
        parts.append(
            f'<text x="{_fmt(cx)}" y="{ty}" text-anchor="end" '
            f'transform="rotate(-40 {_fmt(cx)} {ty})">{escape(str(lab))}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart(
    xs: Sequence[float],
    series: Mapping[str, Sequence[float]],
    title: str,
    xlabel: str,
    ylabel: str,
    log_x: bool = False,
) -> str:
    """One polyline per series over shared x positions, with a legend."""
    for name, ys in series.items():
        if len(ys) != len(xs):
            raise ValueError(f"series {name!r} has {len(ys)} points, expected {len(xs)}")
    if log_x and any(x <= 0 for x in xs):
        raise ValueError("log-scaled x needs positive values")
    tx = [math.log10(x) for x in xs] if log_x else list(xs)
    x_lo, x_hi = (min(tx), max(tx)) if tx else (0.0, 1.0)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    lo, hi = _range([v for ys in series.values() for v in ys])
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    parts = _header(title) + _y_axis(lo, hi, ylabel)
    for x, t in zip(xs, tx):
        px = MARGIN_L + plot_w * (t - x_lo) / (x_hi - x_lo)
        parts.append(f'<text x="{_fmt(px)}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle">{x:g}</text>')
    parts.append(f'<text x="{MARGIN_L + plot_w / 2}" y="{HEIGHT - 20}" text-anchor="middle">{escape(xlabel)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [
            (MARGIN_L + plot_w * (t - x_lo) / (x_hi - x_lo), HEIGHT - MARGIN_B - plot_h * (y - lo) / (hi - lo))
            for t, y in zip(tx, ys)
            if math.isfinite(y)
        ]
        path = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for px, py in pts:
            parts.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="3" fill="{color}"/>')
        ly = MARGIN_T + 14 * k
        parts.append(f'<rect x="{WIDTH - MARGIN_R - 120}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN_R - 106}" y="{ly + 1}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
