"""Self-contained SVG figures: path-loss heatmaps, CIR stem plots and loss curves."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

# perceptually ordered ramp (dark = strong loss) sampled at 6 stops
_RAMP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [190, 223, 38], [253, 231, 37]], float)


def color(t: float) -> str:
    """Hex color for t in [0, 1] on the ramp."""
    t = float(np.clip(t, 0.0, 1.0)) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    c = _RAMP[i] + (t - i) * (_RAMP[i + 1] - _RAMP[i])
    return "#" + "".join(f"{int(round(x)):02x}" for x in c)


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def heatmap_svg(values: np.ndarray, extent, title: str = "path loss [dB]", cell: float = 6.0,
                vmin: float | None = None, vmax: float | None = None) -> str:
    """Grid of values (rows along y, columns along x); non-finite cells are drawn gray.

    ``extent`` is (x0, x1, y0, y1) in metres, used for axis labels only.
    """
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    finite = values[np.isfinite(values)]
    lo = float(finite.min()) if vmin is None and finite.size else (vmin if vmin is not None else 0.0)
    hi = float(finite.max()) if vmax is None and finite.size else (vmax if vmax is not None else 1.0)
    span = hi - lo if hi > lo else 1.0
    ml, mt = 50, 30
    w, h = ml + nx * cell + 90, mt + ny * cell + 40
    body = [f'<text x="{ml}" y="18">{escape(title)}</text>']
    for j in range(ny):
        y = mt + (ny - 1 - j) * cell  # row 0 at the bottom (smallest y)
        for i in range(nx):
            v = values[j, i]
            fill = color((v - lo) / span) if np.isfinite(v) else "#bbbbbb"
            body.append(f'<rect x="{ml + i * cell:.2f}" y="{y:.2f}" width="{cell:.2f}" height="{cell:.2f}" '
                        f'fill="{fill}"><title>{_fmt(v) if np.isfinite(v) else "no paths"}</title></rect>')
    x0, x1, y0, y1 = extent
    body.append(f'<text x="{ml}" y="{mt + ny * cell + 15}">{_fmt(x0)} m</text>')
    body.append(f'<text x="{ml + nx * cell}" y="{mt + ny * cell + 15}" text-anchor="end">{_fmt(x1)} m</text>')
    body.append(f'<text x="{ml - 4}" y="{mt + ny * cell}" text-anchor="end">{_fmt(y0)}</text>')
    body.append(f'<text x="{ml - 4}" y="{mt + 10}" text-anchor="end">{_fmt(y1)}</text>')
    bx = ml + nx * cell + 20
    steps = 50
    bh = ny * cell / steps
    for k in range(steps):
        body.append(f'<rect x="{bx}" y="{mt + (steps - 1 - k) * bh:.2f}" width="14" height="{bh + 0.5:.2f}" '
                    f'fill="{color(k / (steps - 1))}"/>')
    body.append(f'<text x="{bx + 18}" y="{mt + 10}">{_fmt(hi)}</text>')
    body.append(f'<text x="{bx + 18}" y="{mt + ny * cell}">{_fmt(lo)}</text>')
    return _svg(w, h, body)


def _axes(xs, ys, width, height, margin):
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    sx = lambda x: margin + (x - x0) / (x1 - x0) * (width - 2 * margin)  # noqa: E731
    sy = lambda y: height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)  # noqa: E731
    return sx, sy, (x0, x1, y0, y1)


def cir_stem_svg(measured: np.ndarray, predicted: np.ndarray, tap_spacing: float, title: str = "",
                 floor_db: float = -60.0, width: int = 640, height: int = 300) -> str:
    """Stem plot of tap powers in dB (relative to the measured peak) for two CIRs."""
    pm = np.abs(np.asarray(measured)) ** 2
    pp = np.abs(np.asarray(predicted)) ** 2
    ref = max(pm.max(initial=0.0), pp.max(initial=0.0), 1e-300)
    db = lambda p: np.maximum(10 * np.log10(np.maximum(p / ref, 1e-30)), floor_db)  # noqa: E731
    dm, dp = db(pm), db(pp)
    t = np.arange(len(pm)) * tap_spacing * 1e9
    sx, sy, (x0, x1, y0, y1) = _axes(t, np.r_[dm, dp, floor_db, 0.0], width, height, 45)
    body = [f'<text x="45" y="18">{escape(title)}</text>',
            f'<line x1="45" y1="{sy(floor_db):.1f}" x2="{width - 45}" y2="{sy(floor_db):.1f}" stroke="black"/>',
            f'<text x="45" y="{height - 12}">delay [ns] {_fmt(x0)} .. {_fmt(x1)}</text>',
            f'<text x="8" y="{sy(0.0):.1f}">0 dB</text>',
            f'<text x="8" y="{sy(floor_db):.1f}">{_fmt(floor_db)}</text>']
    for series, col, dx in ((dm, "#1f4e9c", -1.2), (dp, "#d1495b", 1.2)):
        for ti, v in zip(t, series):
            x = sx(ti) + dx
            body.append(f'<line x1="{x:.1f}" y1="{sy(floor_db):.1f}" x2="{x:.1f}" y2="{sy(v):.1f}" stroke="{col}"/>')
            body.append(f'<circle cx="{x:.1f}" cy="{sy(v):.1f}" r="1.8" fill="{col}"/>')
    body.append(f'<text x="{width - 170}" y="18" fill="#1f4e9c">measured</text>')
    body.append(f'<text x="{width - 90}" y="18" fill="#d1495b">predicted</text>')
    return _svg(width, height, body)


def loss_curve_svg(iterations, train_loss, validation=None, width: int = 640, height: int = 300) -> str:
    """Training loss (and validation loss where available) on a log axis."""
    it = np.asarray(iterations, dtype=float)
    tl = np.log10(np.maximum(np.asarray(train_loss, dtype=float), 1e-12))
    pts = [(i, v) for i, v in zip(it, validation or []) if v is not None]
    vl = np.log10(np.maximum([v for _, v in pts], 1e-12)) if pts else np.zeros(0)
    ys = np.r_[tl, vl] if len(tl) + len(vl) else np.zeros(1)
    sx, sy, (x0, x1, y0, y1) = _axes(np.r_[it, 0.0], ys, width, height, 45)
    body = [f'<text x="45" y="18">loss (log10)</text>',
            f'<text x="45" y="{height - 12}">iteration {int(x0)} .. {int(x1)}</text>',
            f'<text x="4" y="{sy(y1) + 4:.1f}">{_fmt(y1)}</text>',
            f'<text x="4" y="{sy(y0):.1f}">{_fmt(y0)}</text>']
    if len(it):
        d = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(it, tl))
        body.append(f'<polyline points="{d}" fill="none" stroke="#1f4e9c" stroke-width="1"/>')
    if pts:
        d = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for (x, _), y in zip(pts, vl))
        body.append(f'<polyline points="{d}" fill="none" stroke="#d1495b" stroke-width="1.5"/>')
    return _svg(width, height, body)
