"""Minimal hand-written SVG figures: line chart, horizontal bars, beeswarm, relevance timeline.

Each function returns the document as a string.  Numbers are written with a
fixed precision so identical inputs give identical bytes.
"""
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
LOW_COLOR = (59, 76, 192)
HIGH_COLOR = (180, 4, 38)
MID_COLOR = (221, 221, 221)


def _f(x):
    return f"{x:.2f}"


def _doc(width, height, body):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n')
    return head + f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n"


def _text(x, y, s, anchor="start", size=None, extra=""):
    sz = f' font-size="{size}"' if size else ""
    return f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}"{sz}{extra}>{escape(str(s))}</text>'


def percentile_color(p):
    """Diverging colour for a value percentile; the scale saturates at the 5th and 95th percentiles."""
    u = float(np.clip((p - 0.05) / 0.90, 0.0, 1.0))
    if u < 0.5:
        a, b, k = LOW_COLOR, MID_COLOR, u / 0.5
    else:
        a, b, k = MID_COLOR, HIGH_COLOR, (u - 0.5) / 0.5
    r, g, bl = (round(a[i] + (b[i] - a[i]) * k) for i in range(3))
    return f"#{r:02x}{g:02x}{bl:02x}"


def line_chart(series, title="", xlabel="", ylabel="", ylim=(0.0, 1.0), width=520, height=360):
    """``series``: list of (name, xs, ys).  The x axis is drawn reversed (largest x on the left)."""
    ml, mr, mt, mb = 60, 130, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = sorted({x for _, xs, _ in series for x in xs})
    xmin, xmax = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    if xmax == xmin:
        xmax = xmin + 1

    def px(x):
        return ml + (xmax - x) / (xmax - xmin) * pw

    def py(y):
        return mt + (ylim[1] - y) / (ylim[1] - ylim[0]) * ph

    body = [_text(width / 2, 20, title, "middle", 13),
            f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(6):
        y = ylim[0] + k * (ylim[1] - ylim[0]) / 5
        body.append(f'<line x1="{ml}" x2="{ml + pw}" y1="{_f(py(y))}" y2="{_f(py(y))}" stroke="#eee"/>')
        body.append(_text(ml - 6, py(y) + 4, f"{y:.1f}", "end"))
    for x in xs_all:
        body.append(_text(px(x), mt + ph + 16, f"{x:g}", "middle"))
    body.append(_text(ml + pw / 2, height - 10, xlabel, "middle"))
    body.append(_text(16, mt + ph / 2, ylabel, "middle", extra=f' transform="rotate(-90 16 {_f(mt + ph / 2)})"'))
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in zip(xs, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            body.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="3" fill="{color}"/>')
        ly = mt + 14 + 18 * i
        body.append(f'<line x1="{ml + pw + 12}" x2="{ml + pw + 32}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(_text(ml + pw + 38, ly + 4, name))
    return _doc(width, height, body)


def bar_chart(names, values, title="", xlabel="", width=560, bar_height=16):
    """Horizontal bars, first item on top."""
    ml, mr, mt, mb = 170, 30, 40, 40
    height = mt + mb + bar_height * len(names) + 4
    pw = width - ml - mr
    vmax = max([v for v in values if v > 0] or [1.0])
    body = [_text(width / 2, 20, title, "middle", 13)]
    for i, (n, v) in enumerate(zip(names, values)):
        y = mt + i * bar_height
        w = max(0.0, v) / vmax * pw
        body.append(f'<rect x="{ml}" y="{_f(y + 2)}" width="{_f(w)}" height="{bar_height - 4}" fill="{PALETTE[0]}"/>')
        body.append(_text(ml - 6, y + bar_height - 4, n, "end"))
    body.append(f'<line x1="{ml}" x2="{ml}" y1="{mt}" y2="{mt + bar_height * len(names)}" stroke="#444"/>')
    body.append(_text(ml + pw / 2, height - 12, xlabel, "middle"))
    return _doc(width, height, body)


def beeswarm(rows, title="", xlabel="relevance", width=640, row_height=22, seed=0):
    """``rows``: list of (name, relevances, percentiles), one horizontal strip per parameter.

    Points are jittered vertically by a seeded generator; colour encodes the
    value percentile on a 5th to 95th percentile scale.
    """
    ml, mr, mt, mb = 170, 90, 40, 40
    height = mt + mb + row_height * len(rows)
    pw = width - ml - mr
    allrel = np.concatenate([np.asarray(r, dtype=float) for _, r, _ in rows]) if rows else np.zeros(1)
    vmax = float(allrel.max()) if allrel.size and allrel.max() > 0 else 1.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    body = [_text(width / 2, 20, title, "middle", 13)]
    for i, (name, rel, pct) in enumerate(rows):
        yc = mt + (i + 0.5) * row_height
        body.append(_text(ml - 6, yc + 4, name, "end"))
        jitter = rng.uniform(-0.35, 0.35, size=len(rel)) * row_height
        for r, p, j in zip(rel, pct, jitter):
            body.append(f'<circle cx="{_f(ml + r / vmax * pw)}" cy="{_f(yc + j)}" r="2" '
                        f'fill="{percentile_color(p)}" fill-opacity="0.8"/>')
    body.append(f'<line x1="{ml}" x2="{ml}" y1="{mt}" y2="{mt + row_height * len(rows)}" stroke="#444"/>')
    body.append(_text(ml + pw / 2, height - 12, xlabel, "middle"))
    # colour key
    kx, ky = ml + pw + 30, mt
    for k in range(11):
        body.append(f'<rect x="{kx}" y="{_f(ky + (10 - k) * 10)}" width="12" height="10" '
                    f'fill="{percentile_color(0.05 + 0.09 * k)}"/>')
    body.append(_text(kx + 16, ky + 8, "95th"))
    body.append(_text(kx + 16, ky + 108, "5th"))
    body.append(_text(kx, ky + 126, "value pct."))
    return _doc(width, height, body)


def relevance_timeline(names, relevance, values=None, title="", cell=18):
    """Heat grid of relevance, one row per parameter (top-ranked first), one column per hour."""
    relevance = np.asarray(relevance, dtype=float)
    k, T = relevance.shape
    ml, mt, mb, mr = 170, 40, 40, 20
    width = ml + mr + cell * T
    height = mt + mb + cell * k
    vmax = float(relevance.max()) if relevance.size and relevance.max() > 0 else 1.0
    body = [_text(width / 2, 20, title, "middle", 13)]
    for i in range(k):
        body.append(_text(ml - 6, mt + i * cell + cell - 5, names[i], "end"))
        for t in range(T):
            u = relevance[i, t] / vmax
            shade = round(255 * (1.0 - u))
            tip = f"{names[i]} hour {t}: relevance {relevance[i, t]:.4g}"
            if values is not None:
                tip += f", value {values[i][t]:.4g}"
            body.append(f'<rect x="{ml + t * cell}" y="{mt + i * cell}" width="{cell - 1}" height="{cell - 1}" '
                        f'fill="#ff{shade:02x}{shade:02x}"><title>{escape(tip)}</title></rect>')
    for t in range(0, T, 4):
        body.append(_text(ml + t * cell + cell / 2, mt + k * cell + 14, str(t - T), "middle"))
    body.append(_text(ml + T * cell / 2, height - 8, "hours before prediction", "middle"))
    return _doc(width, height, body)
