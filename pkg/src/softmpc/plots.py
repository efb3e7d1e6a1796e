"""Minimal deterministic SVG plotting.

Writes static line charts with shaded activation bands. Output bytes depend
only on the data passed in, which keeps repeated pipeline runs identical.
"""
from __future__ import annotations

import math

_W, _H = 720, 170
_ML, _MR, _MT, _MB = 56, 14, 18, 30


def _fmt(v: float) -> str:
    if v != v:  # nan
        return "0"
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / n))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * span:
        out.append(round(t, 12))
        t += step
    return out


class Panel:
    """One chart: a few series over a shared x axis plus shaded bands."""

    def __init__(self, title: str, ylabel: str):
        self.title = title
        self.ylabel = ylabel
        self.series = []      # (xs, ys, color, label)
        self.bands = []       # (x0, x1, color, label)
        self.hlines = []      # (y, color)

    def add_series(self, xs, ys, color="#1f6fb2", label=""):
        self.series.append((list(xs), list(ys), color, label))

    def add_band(self, x0, x1, color="#9ad0e8", label=""):
        self.bands.append((float(x0), float(x1), color, label))

    def add_hline(self, y, color="#c04040"):
        self.hlines.append((float(y), color))

    def _limits(self):
        xs_all = [x for s in self.series for x in s[0]]
        ys_all = [y for s in self.series for y in s[1] if y == y]
        for y, _ in self.hlines:
            ys_all.append(y)
        x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
        y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
        if y_hi - y_lo < 1e-9:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad = 0.06 * (y_hi - y_lo)
        return x_lo, x_hi, y_lo - pad, y_hi + pad

    def render(self, oy: int) -> str:
        x_lo, x_hi, y_lo, y_hi = self._limits()
        pw = _W - _ML - _MR
        ph = _H - _MT - _MB

        def sx(x):
            return _ML + pw * (x - x_lo) / (x_hi - x_lo)

        def sy(y):
            return oy + _MT + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

        parts = []
        parts.append(
            f'<rect x="{_ML}" y="{oy + _MT}" width="{pw}" height="{ph}" '
            f'fill="#ffffff" stroke="#888888" stroke-width="1"/>')
        for x0, x1, color, label in self.bands:
            x0c = min(max(x0, x_lo), x_hi)
            x1c = min(max(x1, x_lo), x_hi)
            if x1c <= x0c:
                continue
            parts.append(
                f'<rect class="band" x="{_fmt(sx(x0c))}" y="{oy + _MT}" '
                f'width="{_fmt(sx(x1c) - sx(x0c))}" height="{ph}" '
                f'fill="{color}" fill-opacity="0.45"'
                + (f' data-label="{label}"' if label else "") + "/>")
        for t in _ticks(x_lo, x_hi):
            parts.append(
                f'<line x1="{_fmt(sx(t))}" y1="{oy + _MT + ph}" '
                f'x2="{_fmt(sx(t))}" y2="{oy + _MT + ph + 4}" stroke="#555555"/>')
            parts.append(
                f'<text x="{_fmt(sx(t))}" y="{oy + _MT + ph + 16}" '
                f'font-size="10" text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(y_lo, y_hi, 4):
            parts.append(
                f'<line x1="{_ML - 4}" y1="{_fmt(sy(t))}" x2="{_ML}" '
                f'y2="{_fmt(sy(t))}" stroke="#555555"/>')
            parts.append(
                f'<text x="{_ML - 7}" y="{_fmt(sy(t) + 3)}" font-size="10" '
                f'text-anchor="end">{_fmt(t)}</text>')
        for y, color in self.hlines:
            parts.append(
                f'<line x1="{_ML}" y1="{_fmt(sy(y))}" x2="{_ML + pw}" '
                f'y2="{_fmt(sy(y))}" stroke="{color}" stroke-width="1" '
                f'stroke-dasharray="5,4"/>')
        for xs, ys, color, label in self.series:
            pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}"
                           for x, y in zip(xs, ys) if y == y)
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.4" '
                f'points="{pts}"'
                + (f' data-label="{label}"' if label else "") + "/>")
        parts.append(
            f'<text x="{_ML}" y="{oy + 13}" font-size="11" '
            f'font-weight="bold">{self.title}</text>')
        parts.append(
            f'<text x="12" y="{oy + _MT + ph / 2}" font-size="10" '
            f'transform="rotate(-90 12 {oy + _MT + ph / 2})" '
            f'text-anchor="middle">{self.ylabel}</text>')
        return "\n".join(parts)


def write_figure(filename: str, panels: list, xlabel: str = "time [s]") -> None:
    height = _H * len(panels) + 18
    body = []
    for i, panel in enumerate(panels):
        body.append(panel.render(i * _H))
    body.append(
        f'<text x="{_ML + (_W - _ML - _MR) / 2}" y="{height - 4}" '
        f'font-size="11" text-anchor="middle">{xlabel}</text>')
    doc = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
        f'height="{height}" viewBox="0 0 {_W} {height}">\n'
        f'<rect width="{_W}" height="{height}" fill="#fafafa"/>\n'
        + "\n".join(body) + "\n</svg>\n")
    with open(filename, "w") as fh:
        fh.write(doc)
