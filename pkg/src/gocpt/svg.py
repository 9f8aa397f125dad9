"""Minimal static SVG line charts.

Output depends only on the input numbers (fixed-precision formatting, series
drawn in sorted name order), so the same data always yields the same bytes.
"""

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f")
N_TICKS = 5


def _nice_range(lo, hi):
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("cannot plot non-finite values")
    if hi - lo < 1e-12:
        pad = max(abs(hi), 1.0) * 0.05
        return lo - pad, hi + pad
    return lo, hi


def _fmt(v):
    return f"{v:.2f}"


def _tick_label(v):
    return f"{v:.4g}"


def line_chart(series, title, xlabel, ylabel, markers=False, y_top=None):
    """Render ``{name: (xs, ys)}`` as one polyline per series.

    ``y_top`` pins the upper end of the y axis (e.g. 1.0 for PoF) so that a
    series at that value sits on the top gridline.
    """
    if not series:
        raise ValueError("nothing to plot: no series given")
    names = sorted(series)
    xs_all = np.concatenate([np.asarray(series[n][0], float) for n in names])
    ys_all = np.concatenate([np.asarray(series[n][1], float) for n in names])
    if xs_all.size == 0:
        raise ValueError("nothing to plot: all series are empty")
    x0, x1 = _nice_range(xs_all.min(), xs_all.max())
    y0 = ys_all.min()
    y1 = ys_all.max() if y_top is None else max(y_top, ys_all.max())
    if y_top is not None and y1 - y0 < 1e-12:
        y0 = y1 - 0.05 * max(abs(y1), 1.0)
    y0, y1 = _nice_range(y0, y1)

    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">'
        f"{escape(title)}</text>",
    ]
    for i in range(N_TICKS):
        yv = y0 + (y1 - y0) * i / (N_TICKS - 1)
        xv = x0 + (x1 - x0) * i / (N_TICKS - 1)
        out.append(
            f'<line class="grid" x1="{left}" y1="{_fmt(py(yv))}" x2="{left + pw}" '
            f'y2="{_fmt(py(yv))}" stroke="#dddddd"/>'
        )
        out.append(
            f'<text x="{left - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">'
            f"{_tick_label(yv)}</text>"
        )
        out.append(
            f'<text x="{_fmt(px(xv))}" y="{top + ph + 18}" text-anchor="middle">'
            f"{_tick_label(xv)}</text>"
        )
    out.append(
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>'
    )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">'
        f"{escape(xlabel)}</text>"
    )
    out.append(
        f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for k, name in enumerate(names):
        color = PALETTE[k % len(PALETTE)]
        xs, ys = (np.asarray(v, float) for v in series[name])
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        out.append(
            f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
            f'stroke-width="1.5" points="{pts}"/>'
        )
        if markers:
            for x, y in zip(xs, ys):
                out.append(
                    f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>'
                )
        ly = top + 14 + 18 * k
        out.append(
            f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
