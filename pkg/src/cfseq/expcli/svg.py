"""Standalone SVG line chart of NRMSE against forecast horizon."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60


def nice_ticks(lo, hi, target=5):
    """Round tick values covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    if ticks[-1] < hi:
        ticks.append(round(ticks[-1] + step, 10))
    return ticks


def _fmt(x):
    return f"{x:.2f}"


def render_nrmse_svg(series: dict, title="NRMSE by forecast horizon", sd: dict | None = None) -> str:
    """``series`` maps variant -> list of (horizon, nrmse); ``sd`` optionally maps variant -> list of sd."""
    if not series:
        raise ValueError("nothing to plot")
    hs = [h for pts in series.values() for h, _ in pts]
    vals = [v for pts in series.values() for _, v in pts]
    if sd:
        vals += [v + s for name, pts in series.items() for (_, v), s in zip(pts, sd.get(name, [0] * len(pts)))]
    x_lo, x_hi = min(hs), max(hs)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    yt = nice_ticks(0.0, max(vals) if vals else 1.0)
    y_lo, y_hi = yt[0], yt[-1]
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(h):
        return LEFT + (h - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return TOP + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>']
    for v in yt:
        y = sy(v)
        out.append(f'<line x1="{LEFT}" y1="{_fmt(y)}" x2="{LEFT + pw}" y2="{_fmt(y)}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{LEFT - 8}" y="{_fmt(y + 4)}" text-anchor="end">{v:g}</text>')
    for h in sorted(set(hs)):
        x = sx(h)
        out.append(f'<line x1="{_fmt(x)}" y1="{TOP + ph}" x2="{_fmt(x)}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{TOP + ph + 19}" text-anchor="middle">{h}</text>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">horizon</text>')
    out.append(f'<text x="18" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {TOP + ph / 2:.1f})">NRMSE</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        if sd and name in sd:
            for (h, v), s in zip(pts, sd[name]):
                out.append(f'<line x1="{_fmt(sx(h))}" y1="{_fmt(sy(v - s))}" x2="{_fmt(sx(h))}" '
                           f'y2="{_fmt(sy(v + s))}" stroke="{color}" stroke-opacity="0.5"/>')
        path = " ".join(f"{_fmt(sx(h))},{_fmt(sy(v))}" for h, v in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for h, v in pts:
            out.append(f'<circle cx="{_fmt(sx(h))}" cy="{_fmt(sy(v))}" r="3" fill="{color}"/>')
        ly = TOP + 10 + 18 * i
        out.append(f'<line x1="{LEFT + 12}" y1="{ly}" x2="{LEFT + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + 38}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
