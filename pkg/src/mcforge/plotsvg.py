"""Self-contained SVG line and step plots.

No plotting library is involved; the output is plain SVG text built from a
fixed 800x600 canvas, so identical input always gives identical bytes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import EmptySeries, NonPositiveLogData, PlotError

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 90, 170, 50, 70
N_TICKS = 10
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Series:
    x: Sequence[float]
    y: Sequence[float]
    yerr: Sequence[float] | None = None
    label: str = ""
    # bin edges (len(x) + 1); used for true histogram steps when plot_blocks is set
    x_edges: Sequence[float] | None = None


@dataclass
class PlotFlags:
    plot_error_bars: bool = False
    plot_blocks: bool = False
    log_scale: bool = False
    semilogx: bool = False
    semilogy: bool = False

    @property
    def xlog(self) -> bool:
        return self.log_scale or self.semilogx

    @property
    def ylog(self) -> bool:
        return self.log_scale or self.semilogy

    @classmethod
    def from_dict(cls, d: dict | None) -> PlotFlags:
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PlotError(f"unknown plot flag(s): {', '.join(sorted(unknown))}")
        return cls(**{k: bool(v) for k, v in d.items()})


@dataclass
class PlotSpec:
    series: list[Series]
    flags: PlotFlags = field(default_factory=PlotFlags)
    title: str = ""
    x_label: str = ""
    y_label: str = ""


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_step(span: float) -> float:
    raw = span / N_TICKS
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 5.0, 10.0):
        if raw <= m * mag * (1 + 1e-9):
            return m * mag
    return 10.0 * mag


def linear_ticks(lo: float, hi: float) -> list[float]:
    if hi <= lo:
        return [lo]
    step = _nice_step(hi - lo)
    first = math.ceil(lo / step - 1e-9)
    ticks = []
    k = first
    while k * step <= hi * (1 + 1e-12) + 1e-300:
        ticks.append(round(k * step, 12))
        k += 1
    return ticks


def log_ticks(lo: float, hi: float) -> list[int]:
    """Decade exponents covering [lo, hi]; thinned to about N_TICKS labels."""
    a, b = math.floor(math.log10(lo) + 1e-12), math.ceil(math.log10(hi) - 1e-12)
    decades = list(range(a, b + 1))
    stride = max(1, math.ceil(len(decades) / N_TICKS))
    return decades[::stride]


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    return f"{v:.6g}"


def _decade_label(k: int) -> str:
    return f"{10.0 ** k:g}" if -2 <= k <= 3 else f"1e{k}"


class _Axis:
    def __init__(self, lo: float, hi: float, log_scale: bool, p0: float, p1: float):
        self.log = log_scale
        if log_scale:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi == lo:
            pad = abs(lo) * 0.05 or 1.0
            lo, hi = lo - pad, hi + pad
        self.lo, self.hi, self.p0, self.p1 = lo, hi, p0, p1

    def __call__(self, v: float) -> float:
        t = math.log10(v) if self.log else v
        return self.p0 + (t - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)

    def ticks(self) -> list[tuple[float, str]]:
        if self.log:
            out = [(10.0 ** k, _decade_label(k)) for k in log_ticks(10 ** self.lo, 10 ** self.hi)]
            return [(v, s) for v, s in out if self.lo - 1e-9 <= math.log10(v) <= self.hi + 1e-9]
        return [(v, _tick_label(v)) for v in linear_ticks(self.lo, self.hi)]


def _validate(spec: PlotSpec) -> None:
    if not spec.series:
        raise EmptySeries("plot has no series")
    for s in spec.series:
        if len(s.x) != len(s.y):
            raise PlotError(f"series {s.label!r}: x and y lengths differ ({len(s.x)} vs {len(s.y)})")
        if s.yerr is not None and len(s.yerr) != len(s.y):
            raise PlotError(f"series {s.label!r}: yerr length differs from y")
        if s.x_edges is not None and len(s.x_edges) != len(s.x) + 1:
            raise PlotError(f"series {s.label!r}: x_edges must have len(x) + 1 entries")
        if len(s.x) < 2:
            raise EmptySeries(f"series {s.label!r} needs at least 2 points")
        if spec.flags.xlog:
            xs = list(s.x) + (list(s.x_edges) if s.x_edges is not None and spec.flags.plot_blocks else [])
            if min(xs) <= 0:
                raise NonPositiveLogData("x")
        if spec.flags.ylog and min(s.y) <= 0:
            raise NonPositiveLogData("y")


def _step_points(s: Series) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    if s.x_edges is not None:
        for i, y in enumerate(s.y):
            xs += [s.x_edges[i], s.x_edges[i + 1]]
            ys += [y, y]
        return xs, ys
    # centred steps between neighbouring x values
    x = list(s.x)
    bounds = [x[0]] + [0.5 * (a + b) for a, b in zip(x, x[1:])] + [x[-1]]
    for i, y in enumerate(s.y):
        xs += [bounds[i], bounds[i + 1]]
        ys += [y, y]
    return xs, ys


def render_svg(spec: PlotSpec) -> str:
    _validate(spec)
    fl = spec.flags
    xs_all, ys_all = [], []
    for s in spec.series:
        xs_all += list(s.x_edges) if (fl.plot_blocks and s.x_edges is not None) else list(s.x)
        ys_all += list(s.y)
        if fl.plot_error_bars and s.yerr is not None:
            for y, e in zip(s.y, s.yerr):
                ys_all.append(y + e)
                if not fl.ylog or y - e > 0:
                    ys_all.append(y - e)
    x_ax = _Axis(min(xs_all), max(xs_all), fl.xlog, LEFT, WIDTH - RIGHT)
    y_ax = _Axis(min(ys_all), max(ys_all), fl.ylog, HEIGHT - BOTTOM, TOP)
    y_floor = 10 ** y_ax.lo if fl.ylog else y_ax.lo

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
    ]
    x0, x1, y0, y1 = LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP
    out.append('<g class="axes" stroke="#000000" stroke-width="1">')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>')
    out.append("</g>")

    out.append('<g class="xticks" font-family="sans-serif" font-size="11" text-anchor="middle">')
    for v, label in x_ax.ticks():
        px = _fmt(x_ax(v))
        out.append(f'<line x1="{px}" y1="{y0}" x2="{px}" y2="{y0 + 5}" stroke="#000000"/>')
        out.append(f'<text x="{px}" y="{y0 + 18}">{escape(label)}</text>')
    out.append("</g>")
    out.append('<g class="yticks" font-family="sans-serif" font-size="11" text-anchor="end">')
    for v, label in y_ax.ticks():
        py = _fmt(y_ax(v))
        out.append(f'<line x1="{x0 - 5}" y1="{py}" x2="{x0}" y2="{py}" stroke="#000000"/>')
        out.append(f'<text x="{x0 - 8}" y="{py}" dy="4">{escape(label)}</text>')
    out.append("</g>")

    if spec.title:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="28" font-family="sans-serif" font-size="16" '
                   f'text-anchor="middle">{escape(spec.title)}</text>')
    if spec.x_label:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 22}" font-family="sans-serif" font-size="13" '
                   f'text-anchor="middle">{escape(spec.x_label)}</text>')
    if spec.y_label:
        cy = (y0 + y1) / 2
        out.append(f'<text x="22" y="{cy:.1f}" font-family="sans-serif" font-size="13" text-anchor="middle" '
                   f'transform="rotate(-90 22 {cy:.1f})">{escape(spec.y_label)}</text>')

    for i, s in enumerate(spec.series):
        color = COLORS[i % len(COLORS)]
        px, py = _step_points(s) if fl.plot_blocks else (list(s.x), list(s.y))
        pts = " ".join(f"{_fmt(x_ax(a))},{_fmt(y_ax(b))}" for a, b in zip(px, py))
        out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if fl.plot_error_bars and s.yerr is not None:
            out.append(f'<g class="errorbars" stroke="{color}" stroke-width="1">')
            for x, y, e in zip(s.x, s.y, s.yerr):
                lo = y - e
                if fl.ylog and lo <= 0:
                    lo = y_floor
                cx = _fmt(x_ax(x))
                out.append(f'<line x1="{cx}" y1="{_fmt(y_ax(lo))}" x2="{cx}" y2="{_fmt(y_ax(y + e))}"/>')
            out.append("</g>")

    out.append('<g class="legend" font-family="sans-serif" font-size="12">')
    for i, s in enumerate(spec.series):
        color = COLORS[i % len(COLORS)]
        ly = TOP + 12 + 20 * i
        lx = WIDTH - RIGHT + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 30}" y="{ly + 4}">{escape(s.label or f"series {i + 1}")}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_plot(spec: PlotSpec, out) -> Path:
    out = Path(out)
    out.write_text(render_svg(spec), encoding="utf-8")
    return out


def plot_store(data, flags, out_dir) -> list[Path]:
    """One SVG per store entry with spectral rows, named ``<key without .lis>.svg``."""
    flags = flags if isinstance(flags, PlotFlags) else PlotFlags.from_dict(flags)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key in sorted(data.files):
        section = data.files[key].section
        rows = section.rows
        if len(rows) < 2:
            log.warning("%s: no spectral rows to plot", key)
            continue
        edges = [r[0] for r in rows] + [rows[-1][1]]
        series = Series(
            x=[0.5 * (r[0] + r[1]) for r in rows],
            y=[r[2] for r in rows],
            yerr=[r[2] * r[3] / 100.0 for r in rows],
            label=section.detector_name or key,
            x_edges=edges,
        )
        stem = key[:-4] if key.endswith(".lis") else key
        spec = PlotSpec([series], flags, title=key, x_label="Energy (GeV)", y_label="Value per primary")
        written.append(render_plot(spec, out_dir / f"{stem}.svg"))
    return written
