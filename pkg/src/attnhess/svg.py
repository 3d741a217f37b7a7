"""Minimal self-contained SVG charts for experiment outputs."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

W, H = 640, 420
PAD_L, PAD_R, PAD_T, PAD_B = 70, 180, 40, 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _scale(vals, log):
    vals = [math.log10(v) if log else v for v in vals]
    lo, hi = min(vals), max(vals)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    return lo, hi


def line_chart(series: dict, title: str, xlabel: str, ylabel: str,
               logx: bool = False, logy: bool = False) -> str:
    """``series`` maps a legend label to ``(xs, ys)``; non-positive values are dropped on log axes."""
    clean = {}
    for name, (xs, ys) in series.items():
        pts = [(x, y) for x, y in zip(xs, ys)
               if math.isfinite(x) and math.isfinite(y) and (x > 0 or not logx) and (y > 0 or not logy)]
        if pts:
            clean[name] = pts
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if not clean:
        out.append(f'<text x="{W / 2:.1f}" y="{H / 2:.1f}" text-anchor="middle">no data</text></svg>')
        return "\n".join(out)
    xlo, xhi = _scale([p[0] for pts in clean.values() for p in pts], logx)
    ylo, yhi = _scale([p[1] for pts in clean.values() for p in pts], logy)
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B

    def px(x):
        v = math.log10(x) if logx else x
        return PAD_L + (v - xlo) / (xhi - xlo) * pw

    def py(y):
        v = math.log10(y) if logy else y
        return PAD_T + ph - (v - ylo) / (yhi - ylo) * ph

    out.append(f'<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for k in range(5):
        fx = xlo + (xhi - xlo) * k / 4
        fy = ylo + (yhi - ylo) * k / 4
        xt = f"1e{fx:.2g}" if logx else f"{fx:.3g}"
        yt = f"1e{fy:.3g}" if logy else f"{fy:.3g}"
        out.append(f'<text x="{PAD_L + pw * k / 4:.1f}" y="{PAD_T + ph + 15}" text-anchor="middle">{xt}</text>')
        out.append(f'<text x="{PAD_L - 5}" y="{PAD_T + ph - ph * k / 4 + 4:.1f}" text-anchor="end">{yt}</text>')
    out.append(f'<text x="{PAD_L + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{PAD_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {PAD_T + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, pts) in enumerate(clean.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = PAD_T + 12 + 14 * i
        out.append(f'<line x1="{W - PAD_R + 10}" y1="{ly - 4}" x2="{W - PAD_R + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - PAD_R + 35}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out)
