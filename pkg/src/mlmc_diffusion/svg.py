"""Minimal SVG line plots with log-scale axes, for diagnostics only."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
PANEL_W, PANEL_H = 360, 260
MARGIN = dict(left=62, right=14, top=30, bottom=44)


@dataclass
class Panel:
    title: str
    xlabel: str
    ylabel: str
    series: list = field(default_factory=list)  # (label, xs, ys)
    logx: bool = False
    logy: bool = True

    def add(self, label, xs, ys):
        self.series.append((label, list(xs), list(ys)))
        return self


def _tf(v, log):
    return math.log10(v) if log else v


def _usable(x, y, p: Panel):
    ok = math.isfinite(x) and math.isfinite(y)
    return ok and (not p.logx or x > 0) and (not p.logy or y > 0)


def _ticks(lo, hi, log):
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, (b - a) // 6)
        return [(v, f"1e{v}") for v in range(a, b + 1, step)]
    span = hi - lo or 1.0
    step = 10 ** math.floor(math.log10(span / 5))
    for m in (1, 2, 5, 10):
        if span / (m * step) <= 6:
            step *= m
            break
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-12 * span:
        out.append((v, f"{v:g}"))
        v += step
    return out


def _panel_svg(p: Panel, ox, oy) -> list[str]:
    pts = [(_tf(x, p.logx), _tf(y, p.logy)) for _, xs, ys in p.series
           for x, y in zip(xs, ys) if _usable(x, y, p)]
    w = PANEL_W - MARGIN["left"] - MARGIN["right"]
    h = PANEL_H - MARGIN["top"] - MARGIN["bottom"]
    x0, y0 = ox + MARGIN["left"], oy + MARGIN["top"]
    out = [f'<text x="{ox + PANEL_W / 2:.1f}" y="{oy + 18}" text-anchor="middle" font-size="13">{escape(p.title)}</text>',
           f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>']
    if not pts:
        out.append(f'<text x="{x0 + w / 2:.1f}" y="{y0 + h / 2:.1f}" text-anchor="middle" font-size="11">no data</text>')
        return out
    xl, xh = min(q[0] for q in pts), max(q[0] for q in pts)
    yl, yh = min(q[1] for q in pts), max(q[1] for q in pts)
    if xh == xl:
        xl, xh = xl - 0.5, xh + 0.5
    if yh == yl:
        yl, yh = yl - 0.5, yh + 0.5
    pad = 0.05 * (yh - yl)
    yl, yh = yl - pad, yh + pad

    def sx(v):
        return x0 + (v - xl) / (xh - xl) * w

    def sy(v):
        return y0 + h - (v - yl) / (yh - yl) * h

    for v, lab in _ticks(xl, xh, p.logx):
        if xl - 1e-9 <= v <= xh + 1e-9:
            out.append(f'<line x1="{sx(v):.1f}" y1="{y0 + h}" x2="{sx(v):.1f}" y2="{y0 + h + 4}" stroke="#444"/>')
            out.append(f'<text x="{sx(v):.1f}" y="{y0 + h + 16}" text-anchor="middle" font-size="10">{lab}</text>')
    for v, lab in _ticks(yl, yh, p.logy):
        if yl - 1e-9 <= v <= yh + 1e-9:
            out.append(f'<line x1="{x0 - 4}" y1="{sy(v):.1f}" x2="{x0}" y2="{sy(v):.1f}" stroke="#444"/>')
            out.append(f'<text x="{x0 - 6}" y="{sy(v) + 3:.1f}" text-anchor="end" font-size="10">{lab}</text>')
    out.append(f'<text x="{x0 + w / 2:.1f}" y="{oy + PANEL_H - 8}" text-anchor="middle" font-size="11">{escape(p.xlabel)}</text>')
    out.append(f'<text x="{ox + 14}" y="{y0 + h / 2:.1f}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 {ox + 14} {y0 + h / 2:.1f})">{escape(p.ylabel)}</text>')
    for k, (label, xs, ys) in enumerate(p.series):
        c = COLORS[k % len(COLORS)]
        q = [(sx(_tf(x, p.logx)), sy(_tf(y, p.logy))) for x, y in zip(xs, ys) if _usable(x, y, p)]
        if len(q) > 1:
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b in q)
            out.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{c}"/>' for a, b in q]
        out.append(f'<text x="{x0 + w - 4}" y="{y0 + 14 + 13 * k}" text-anchor="end" font-size="10" '
                   f'fill="{c}">{escape(label)}</text>')
    return out


def write_svg(path, panels: list[Panel], comment: str = "", cols: int = 2) -> None:
    """Write panels on a grid, ``cols`` per row."""
    rows = math.ceil(len(panels) / cols)
    W, H = cols * PANEL_W, rows * PANEL_H
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
            f'font-family="sans-serif">']
    if comment:
        body.append(f"<!-- {escape(comment).replace('--', '- -')} -->")
    body.append(f'<rect width="{W}" height="{H}" fill="white"/>')
    for i, p in enumerate(panels):
        body += _panel_svg(p, (i % cols) * PANEL_W, (i // cols) * PANEL_H)
    body.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(body) + "\n")
