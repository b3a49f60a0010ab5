"""Bare-bones SVG line charts for training histories."""
from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _panel(x0, y0, w, h, title, series, xlabel) -> list[str]:
    pts = [p for s in series.values() for p in s]
    out = [f'<text x="{x0 + w / 2}" y="{y0 - 8}" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>']
    if not pts:
        out.append(f'<text x="{x0 + w / 2}" y="{y0 + h / 2}" text-anchor="middle" font-size="11">no data</text>')
        return out
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xhi = xlo + 1
    if yhi == ylo:
        yhi = ylo + 1

    def sx(v):
        return x0 + (v - xlo) / (xhi - xlo) * w

    def sy(v):
        return y0 + h - (v - ylo) / (yhi - ylo) * h

    for t in _ticks(ylo, yhi):
        out.append(f'<line x1="{x0 - 4}" y1="{sy(t):.1f}" x2="{x0}" y2="{sy(t):.1f}" stroke="#444"/>')
        out.append(f'<text x="{x0 - 6}" y="{sy(t) + 4:.1f}" text-anchor="end" font-size="10">{t:.3g}</text>')
    for t in _ticks(xlo, xhi):
        out.append(f'<text x="{sx(t):.1f}" y="{y0 + h + 14}" text-anchor="middle" font-size="10">{t:.3g}</text>')
    out.append(f'<text x="{x0 + w / 2}" y="{y0 + h + 30}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = y0 + 14 + 14 * i
        out.append(f'<line x1="{x0 + w - 90}" y1="{ly - 4}" x2="{x0 + w - 74}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{x0 + w - 70}" y="{ly}" font-size="10">{escape(name)}</text>')
    return out


def line_charts(panels: list[tuple[str, dict[str, list[tuple[float, float]]]]], xlabel: str = "round",
                width: int = 520, height: int = 260) -> str:
    """Stack one chart per ``(title, {series name: [(x, y), ...]})`` panel vertically."""
    margin_l, margin_t, gap = 60, 30, 70
    total_h = margin_t + len(panels) * (height + gap)
    body = []
    for i, (title, series) in enumerate(panels):
        body += _panel(margin_l, margin_t + i * (height + gap), width, height, title, series, xlabel)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + margin_l + 20}" height="{total_h}" '
            f'font-family="sans-serif">\n' + "\n".join(body) + "\n</svg>\n")
