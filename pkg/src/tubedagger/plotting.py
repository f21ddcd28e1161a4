"""Self-contained SVG plots with the plotted data embedded as a comment.

No plotting dependency: each function returns an SVG document string.
"""

from __future__ import annotations

import json

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _data_comment(data):
    # "--" may not appear inside an XML comment; JSON never produces it but be safe.
    text = json.dumps(data, sort_keys=True).replace("--", "- -")
    return f"<!-- data: {text} -->"


class _Axes:
    def __init__(self, xlim, ylim):
        (self.x0, self.x1), (self.y0, self.y1) = _pad(xlim), _pad(ylim)

    def x(self, v):
        return MARGIN + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def y(self, v):
        return HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)


def _pad(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        half = max(abs(lo) * 0.05, 0.5)
        return lo - half, hi + half
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(ax, title, xlabel, ylabel):
    out = [
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
        'fill="none" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{_esc(ylabel)}</text>',
    ]
    for v in np.linspace(ax.y0, ax.y1, 5):
        out.append(f'<text x="{MARGIN - 4}" y="{ax.y(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _doc(body, data):
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
    return "\n".join([head, _data_comment(data), *body, "</svg>"]) + "\n"


def line_plot(series, title="", xlabel="episode", ylabel=""):
    """``series``: mapping label -> (xs, ys)."""
    if not series:
        raise ValueError("nothing to plot")
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    ax = _Axes((xs.min(), xs.max()), (ys.min(), ys.max()))
    body = _frame(ax, title, xlabel, ylabel)
    for k, (label, (x, y)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{ax.x(a):.2f},{ax.y(b):.2f}" for a, b in zip(x, y))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * (k + 1)}" font-size="10" '
                    f'fill="{color}">{_esc(label)}</text>')
    data = {label: {"x": list(map(float, x)), "y": list(map(float, y))} for label, (x, y) in series.items()}
    return _doc(body, data)


def boxplot(groups, title="", ylabel=""):
    """``groups``: mapping label -> sequence of values (one box per label)."""
    if not groups:
        raise ValueError("nothing to plot")
    vals = [np.asarray(v, float) for v in groups.values()]
    allv = np.concatenate([v for v in vals if v.size] or [np.zeros(1)])
    ax = _Axes((0, len(groups) + 1), (allv.min(), allv.max()))
    body = _frame(ax, title, "", ylabel)
    half = 0.3 * (WIDTH - 2 * MARGIN) / (len(groups) + 1)
    for k, (label, v) in enumerate(zip(groups, vals), start=1):
        cx = ax.x(k)
        body.append(f'<text x="{cx:.1f}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle" '
                    f'font-size="10">{_esc(label)}</text>')
        if not v.size:
            continue
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        lo, hi = v.min(), v.max()
        body.append(f'<line x1="{cx:.1f}" y1="{ax.y(lo):.1f}" x2="{cx:.1f}" y2="{ax.y(hi):.1f}" stroke="black"/>')
        body.append(f'<rect x="{cx - half:.1f}" y="{ax.y(q3):.1f}" width="{2 * half:.1f}" '
                    f'height="{max(ax.y(q1) - ax.y(q3), 1):.1f}" fill="#cfe2f3" stroke="black"/>')
        body.append(f'<line x1="{cx - half:.1f}" y1="{ax.y(med):.1f}" x2="{cx + half:.1f}" '
                    f'y2="{ax.y(med):.1f}" stroke="#d62728" stroke-width="2"/>')
    data = {label: list(map(float, v)) for label, v in zip(groups, vals)}
    return _doc(body, data)


def _ellipse_points(c, r, A, dims, n=48):
    """Boundary of the projection of {x : ||A(x - c)|| <= r} onto two coordinates."""
    shape = r * r * np.linalg.inv(A.T @ A)
    sub = shape[np.ix_(dims, dims)]
    w, v = np.linalg.eigh(sub)
    L = v * np.sqrt(np.clip(w, 0.0, None))
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return c[list(dims)] + (L @ np.vstack([np.cos(th), np.sin(th)])).T


def tube_plot(tube, dims=(0, 1), every=1, overlay=None, title="reach-tube projection"):
    """Slice ellipses projected onto ``dims``, coloured from blue (t=0) to red (t=T).

    ``overlay=(beta_minus, beta_plus)`` adds the two scaled boundaries per slice.
    """
    i, j = dims
    if tube.dim < 2:
        raise ValueError("a 2-D projection needs at least two state dimensions")
    if not (0 <= i < tube.dim and 0 <= j < tube.dim) or i == j:
        raise ValueError(f"dims must be two distinct indices below {tube.dim}")
    if every < 1:
        raise ValueError("every must be >= 1")
    shown = list(range(0, len(tube), every))
    if shown[-1] != len(tube) - 1:
        shown.append(len(tube) - 1)
    rings = []
    for t in shown:
        sl = tube.slices[t]
        rings.append((t, 1.0, _ellipse_points(sl.c, sl.r, sl.A, (i, j))))
        if overlay is not None:
            for beta in overlay:
                if beta > 0:
                    rings.append((t, float(beta), _ellipse_points(sl.c, beta * sl.r, sl.A, (i, j))))
    pts = np.concatenate([p for _, _, p in rings])
    ax = _Axes((pts[:, 0].min(), pts[:, 0].max()), (pts[:, 1].min(), pts[:, 1].max()))
    body = _frame(ax, title, f"x{i}", f"x{j}")
    last = max(len(tube) - 1, 1)
    for t, scale, p in rings:
        f = t / last
        color = f"rgb({int(255 * f)},{int(80 * (1 - f))},{int(255 * (1 - f))})"
        dash = "" if scale == 1.0 else ' stroke-dasharray="3,2"'
        path = " ".join(f"{ax.x(a):.2f},{ax.y(b):.2f}" for a, b in p)
        body.append(f'<polygon points="{path}" fill="none" stroke="{color}" stroke-width="0.8"{dash}/>')
    data = {
        "dims": [i, j],
        "slices": [
            {"t": t, "tau": tube.slices[t].tau, "c": tube.slices[t].c[[i, j]].tolist(), "r": tube.slices[t].r}
            for t in shown
        ],
        "overlay": list(overlay) if overlay is not None else None,
    }
    return _doc(body, data)
