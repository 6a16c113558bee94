"""Minimal self-contained SVG charts: line plots and histograms.

No plotting dependency; output is deterministic for identical inputs.  Only
the two chart kinds the command line front end needs are provided: overlay
line plots (optionally with a logarithmic y axis) and one-variable
histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["Series", "line_plot", "histogram"]

# Okabe-Ito palette, readable when overlaid
_PALETTE = ("#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9")

_WIDTH = 720
_HEIGHT = 480
# left margin leaves room for y tick labels, bottom for x labels + axis title
_MARGIN = {"left": 72.0, "right": 18.0, "top": 40.0, "bottom": 56.0}


@dataclass(frozen=True)
class Series:
    """One polyline: x and y sequences of equal positive length."""

    x: tuple
    y: tuple
    label: str = ""

    def __post_init__(self) -> None:
        x = tuple(float(v) for v in self.x)
        y = tuple(float(v) for v in self.y)
        if len(x) == 0 or len(x) != len(y):
            raise ValueError("series needs equal, nonzero x and y lengths")
        if not all(math.isfinite(v) for v in x + y):
            raise ValueError("series values must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


def _nice_step(span: float) -> float:
    # largest of {1,2,5}*10^k giving at least ~4 intervals over the span
    raw = span / 4.0
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (5.0, 2.0, 1.0):
        if m * mag <= raw:
            return m * mag
    return mag


def _linear_ticks(lo: float, hi: float) -> list:
    if hi <= lo:
        pad = 0.5 * max(abs(lo), 1.0)
        lo, hi = lo - pad, hi + pad
    step = _nice_step(hi - lo)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _decade_ticks(lo: float, hi: float) -> list:
    lo_e = math.floor(math.log10(lo))
    hi_e = math.ceil(math.log10(hi))
    stride = max(1, (hi_e - lo_e) // 8)
    return [10.0 ** e for e in range(lo_e, hi_e + 1, stride)]


def _fmt(v: float) -> str:
    if v != 0.0 and (abs(v) >= 1e4 or abs(v) < 1e-3):
        return f"{v:.0e}"
    return f"{v:.6g}"


class _Canvas:
    """Accumulates SVG elements in a fixed viewport with data-space mapping."""

    def __init__(self, x_range, y_range, log_y: bool):
        self.parts = []
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.log_y = log_y
        if log_y:
            self.y0, self.y1 = math.log10(self.y0), math.log10(self.y1)
        # degenerate ranges still need a nonzero extent to map through
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x0 + 0.5
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y0 + 0.5
        self.px0 = _MARGIN["left"]
        self.px1 = _WIDTH - _MARGIN["right"]
        self.py0 = _HEIGHT - _MARGIN["bottom"]
        self.py1 = _MARGIN["top"]

    def sx(self, x: float) -> float:
        return self.px0 + (x - self.x0) / (self.x1 - self.x0) * (self.px1 - self.px0)

    def sy(self, y: float) -> float:
        if self.log_y:
            y = math.log10(y)
        return self.py0 + (y - self.y0) / (self.y1 - self.y0) * (self.py1 - self.py0)

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x, y, s, *, anchor="middle", size=12, rotate=None) -> None:
        tr = f' transform="rotate(-90 {x:.1f} {y:.1f})"' if rotate else ""
        self.add(
            f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" '
            f'text-anchor="{anchor}" fill="#333"{tr}>{escape(s)}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
            f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">\n'
            f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


def _frame(c: _Canvas, title: str, x_label: str, y_label: str) -> None:
    x_ticks = _linear_ticks(c.x0, c.x1)
    y_ticks = (
        _decade_ticks(10.0 ** c.y0, 10.0 ** c.y1) if c.log_y else _linear_ticks(c.y0, c.y1)
    )
    for t in x_ticks:
        px = c.sx(t)
        c.add(
            f'<line x1="{px:.1f}" y1="{c.py1:.1f}" x2="{px:.1f}" '
            f'y2="{c.py0:.1f}" stroke="#ddd" stroke-width="1"/>'
        )
        c.text(px, c.py0 + 18, _fmt(t), size=11)
    for t in y_ticks:
        py = c.sy(t)
        c.add(
            f'<line x1="{c.px0:.1f}" y1="{py:.1f}" x2="{c.px1:.1f}" '
            f'y2="{py:.1f}" stroke="#ddd" stroke-width="1"/>'
        )
        c.text(c.px0 - 6, py + 4, _fmt(t), anchor="end", size=11)
    c.add(
        f'<rect x="{c.px0:.1f}" y="{c.py1:.1f}" width="{c.px1 - c.px0:.1f}" '
        f'height="{c.py0 - c.py1:.1f}" fill="none" stroke="#333" stroke-width="1"/>'
    )
    if title:
        c.text((c.px0 + c.px1) / 2, _MARGIN["top"] - 14, title, size=15)
    if x_label:
        c.text((c.px0 + c.px1) / 2, _HEIGHT - 12, x_label)
    if y_label:
        c.text(20, (c.py0 + c.py1) / 2, y_label, rotate=True)


def line_plot(
    series: Sequence[Series],
    path,
    *,
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    log_y: bool = False,
) -> None:
    """Write an overlay line chart of the given series to `path`.

    Parameters
    ----------
    series : sequence of Series
        Drawn in order with a fixed color cycle; labeled series appear in
        the legend.
    log_y : bool
        Use decade ticks on a log10 y axis.  Requires strictly positive
        y values in every series.

    Raises
    ------
    ValueError
        If no series is given, or log_y is requested with a nonpositive
        y value.
    """
    if len(series) == 0:
        raise ValueError("need at least one series")
    ys = [v for s in series for v in s.y]
    xs = [v for s in series for v in s.x]
    if log_y and min(ys) <= 0.0:
        raise ValueError("log_y requires strictly positive y values")
    c = _Canvas((min(xs), max(xs)), (min(ys), max(ys)), log_y)
    _frame(c, title, x_label, y_label)
    for i, s in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{c.sx(x):.2f},{c.sy(y):.2f}" for x, y in zip(s.x, s.y))
        c.add(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.8"/>'
        )
    legend = [(i, s.label) for i, s in enumerate(series) if s.label]
    for slot, (i, label) in enumerate(legend):
        lx = c.px0 + 12
        ly = c.py1 + 16 + 18 * slot
        color = _PALETTE[i % len(_PALETTE)]
        c.add(
            f'<line x1="{lx:.1f}" y1="{ly:.1f}" x2="{lx + 24:.1f}" '
            f'y2="{ly:.1f}" stroke="{color}" stroke-width="1.8"/>'
        )
        c.text(lx + 30, ly + 4, label, anchor="start", size=12)
    with open(path, "w") as fh:
        fh.write(c.render())


def histogram(
    values: Sequence[float],
    path,
    *,
    bins: int = 20,
    title: str = "",
    x_label: str = "",
    bin_range: Optional[tuple] = None,
) -> None:
    """Write a count histogram of `values` to `path`.

    Parameters
    ----------
    bins : int
        Number of equal-width bins (must be positive).
    bin_range : (lo, hi), optional
        Fixed bin support; defaults to the data range.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("need at least one value")
    if not np.all(np.isfinite(vals)):
        raise ValueError("values must be finite")
    if bins < 1:
        raise ValueError("bins must be positive")
    counts, edges = np.histogram(vals, bins=bins, range=bin_range)
    top = max(int(counts.max()), 1)
    c = _Canvas((float(edges[0]), float(edges[-1])), (0.0, float(top)), False)
    _frame(c, title, x_label, "count")
    for k in range(bins):
        if counts[k] == 0:
            continue
        x_left = c.sx(float(edges[k]))
        x_right = c.sx(float(edges[k + 1]))
        y_top = c.sy(float(counts[k]))
        c.add(
            f'<rect x="{x_left:.2f}" y="{y_top:.2f}" '
            f'width="{x_right - x_left:.2f}" height="{c.py0 - y_top:.2f}" '
            f'fill="{_PALETTE[0]}" fill-opacity="0.75" stroke="white" '
            f'stroke-width="0.5"/>'
        )
    with open(path, "w") as fh:
        fh.write(c.render())
