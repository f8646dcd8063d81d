"""Minimal dependency-free SVG line charts for run reports."""

from __future__ import annotations

import math

WIDTH, HEIGHT = 880, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 30, 40

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _ticks(lo, hi, count=6):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min(s for s in (mag, 2 * mag, 2.5 * mag, 5 * mag, 10 * mag) if s >= raw)
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def polyline_chart(path, series, *, title="", x_label="", y_label="",
                   hlines=(), y_pad=0.05):
    """Write one SVG chart; `series` is a list of (label, xs, ys) triples.

    Exactly one <polyline> element is emitted per series; horizontal limit
    lines use <line> elements so polyline counts stay meaningful in tests.
    """
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    ys_all += [h for h, _ in hlines]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    span = (y_hi - y_lo) or 1.0
    y_lo -= y_pad * span
    y_hi += y_pad * span

    px = lambda x: MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R)
    py = lambda y: HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for tick in _ticks(y_lo, y_hi):
        y = py(tick)
        parts.append(f'<line x1="{MARGIN_L}" y1="{y:.2f}" x2="{WIDTH - MARGIN_R}" '
                     f'y2="{y:.2f}" stroke="#eeeeee"/>')
        parts.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{tick:g}</text>')
    for tick in _ticks(x_lo, x_hi):
        x = px(tick)
        parts.append(f'<text x="{x:.2f}" y="{HEIGHT - MARGIN_B + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{tick:g}</text>')
    parts.append(f'<line x1="{MARGIN_L}" y1="{HEIGHT - MARGIN_B}" '
                 f'x2="{WIDTH - MARGIN_R}" y2="{HEIGHT - MARGIN_B}" stroke="black"/>')
    parts.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
                 f'y2="{HEIGHT - MARGIN_B}" stroke="black"/>')
    parts.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="11">{x_label}</text>')
    parts.append(f'<text x="14" y="{HEIGHT / 2:.0f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="11" '
                 f'transform="rotate(-90 14 {HEIGHT / 2:.0f})">{y_label}</text>')

    for value, label in hlines:
        y = py(value)
        parts.append(f'<line x1="{MARGIN_L}" y1="{y:.2f}" x2="{WIDTH - MARGIN_R}" '
                     f'y2="{y:.2f}" stroke="#d62728" stroke-dasharray="6 4"/>')
        parts.append(f'<text x="{WIDTH - MARGIN_R - 4}" y="{y - 4:.2f}" '
                     f'text-anchor="end" font-family="sans-serif" font-size="10" '
                     f'fill="#d62728">{label}</text>')

    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" '
                     f'points="{pts}"><title>{label}</title></polyline>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
