"""Minimal self-contained SVG renderer for trajectory curves.

One document: the predictive mean as a polyline, a +/- 2 standard deviation
band as a single polygon (upper edge forward, lower edge reversed, so 2n
vertices for an n-point curve), and the observed visits as circle markers.
"""

from __future__ import annotations

import math
from pathlib import Path

from .dataset import SubjectRecord
from .deep_kernel import PosteriorCurve
from .errors import ShapeError

WIDTH, HEIGHT = 640.0, 420.0
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 52.0, 16.0, 16.0, 36.0


def _span(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 0.05
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def emit_plot(curve: PosteriorCurve, observed: SubjectRecord, path: str | Path) -> None:
    """Write the curve, its uncertainty band, and the observed visits as SVG."""
    if len(curve.times) == 0:
        raise ShapeError("cannot plot an empty curve")
    sd = [math.sqrt(v) for v in curve.variance]
    upper = [m + 2.0 * s for m, s in zip(curve.mean, sd)]
    lower = [m - 2.0 * s for m, s in zip(curve.mean, sd)]
    obs_t = [v.time_months for v in observed.visits]
    obs_y = [v.value for v in observed.visits]

    t_lo, t_hi = _span(min([*curve.times, *obs_t]), max([*curve.times, *obs_t]))
    y_lo, y_hi = _span(min([*lower, *obs_y]), max([*upper, *obs_y]))

    def sx(t: float) -> float:
        return MARGIN_LEFT + (t - t_lo) / (t_hi - t_lo) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)

    def sy(y: float) -> float:
        return HEIGHT - MARGIN_BOTTOM - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)

    band_pts = [f"{sx(t):.2f},{sy(u):.2f}" for t, u in zip(curve.times, upper)]
    band_pts += [f"{sx(t):.2f},{sy(l):.2f}" for t, l in zip(curve.times[::-1], lower[::-1])]
    mean_pts = [f"{sx(t):.2f},{sy(m):.2f}" for t, m in zip(curve.times, curve.mean)]
    markers = "".join(
        f'<circle cx="{sx(t):.2f}" cy="{sy(y):.2f}" r="3.5" fill="#1a1a2e"/>'
        for t, y in zip(obs_t, obs_y)
    )
    x_axis_y = sy(y_lo)
    svg = (
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:g}" height="{HEIGHT:g}" '
        f'viewBox="0 0 {WIDTH:g} {HEIGHT:g}">'
        f'<rect width="{WIDTH:g}" height="{HEIGHT:g}" fill="white"/>'
        f'<polygon points="{" ".join(band_pts)}" fill="#7aa6d6" fill-opacity="0.35" stroke="none"/>'
        f'<polyline points="{" ".join(mean_pts)}" fill="none" stroke="#27567f" stroke-width="2"/>'
        f"{markers}"
        f'<line x1="{MARGIN_LEFT:g}" y1="{x_axis_y:.2f}" x2="{WIDTH - MARGIN_RIGHT:g}" '
        f'y2="{x_axis_y:.2f}" stroke="#444" stroke-width="1"/>'
        f'<line x1="{MARGIN_LEFT:g}" y1="{MARGIN_TOP:g}" x2="{MARGIN_LEFT:g}" '
        f'y2="{x_axis_y:.2f}" stroke="#444" stroke-width="1"/>'
        f'<text x="{(WIDTH / 2):g}" y="{HEIGHT - 8:g}" font-size="13" text-anchor="middle" '
        f'fill="#222">months since first visit</text>'
        f"</svg>\n"
    )
    Path(path).write_text(svg, encoding="utf-8")
