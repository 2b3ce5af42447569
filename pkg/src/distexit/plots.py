"""Minimal native SVG charts: accuracy/speed-up curves and exit histograms.

Output is plain text with fixed number formatting, so identical inputs give
identical files.
"""

from __future__ import annotations

from html import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]
WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 64, 170, 36, 52


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-9:
        pad = max(abs(hi) * 0.05, 0.01)
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        self.pw = WIDTH - LEFT - RIGHT
        self.ph = HEIGHT - TOP - BOTTOM

    def x(self, v: float) -> float:
        return LEFT + (v - self.x0) / (self.x1 - self.x0) * self.pw

    def y(self, v: float) -> float:
        return TOP + self.ph - (v - self.y0) / (self.y1 - self.y0) * self.ph

    def axes(self, title: str, xlabel: str, ylabel: str, ticks: int = 5) -> list[str]:
        out = [
            f'<rect x="{LEFT}" y="{TOP}" width="{self.pw}" height="{self.ph}" fill="none" stroke="#333"/>',
            f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{LEFT + self.pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">'
            f'{escape(xlabel)}</text>',
            f'<text x="16" y="{TOP + self.ph / 2:.0f}" text-anchor="middle" font-size="13" '
            f'transform="rotate(-90 16 {TOP + self.ph / 2:.0f})">{escape(ylabel)}</text>',
        ]
        for i in range(ticks + 1):
            xv = self.x0 + (self.x1 - self.x0) * i / ticks
            yv = self.y0 + (self.y1 - self.y0) * i / ticks
            out.append(f'<text x="{_fmt(self.x(xv))}" y="{TOP + self.ph + 18}" text-anchor="middle" '
                       f'font-size="11">{xv:.3g}</text>')
            out.append(f'<text x="{LEFT - 6}" y="{_fmt(self.y(yv) + 4)}" text-anchor="end" '
                       f'font-size="11">{yv:.3g}</text>')
        return out


def _document(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>', *body, "</svg>"]) + "\n"


def _legend(entries: list[tuple[str, str, bool]]) -> list[str]:
    out = []
    x = WIDTH - RIGHT + 12
    for i, (label, color, point) in enumerate(entries):
        y = TOP + 10 + 18 * i
        if point:
            out.append(f'<path d="M{x + 9} {y - 6} l6 6 l-6 6 l-6 -6 z" fill="{color}"/>')
        else:
            out.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x + 24}" y="{y + 4}" font-size="12">{escape(label)}</text>')
    return out


def tradeoff_svg(curves: list[dict], title: str = "Accuracy vs speed-up") -> str:
    """``curves``: dicts with ``label``, ``speedup`` and ``accuracy`` lists; a
    curve with ``point=True`` (e.g. the oracle) is drawn as a single marker."""
    xs = [v for c in curves for v in c["speedup"]] or [1.0]
    ys = [v for c in curves for v in c["accuracy"]] or [0.0]
    frame = _Frame(_nice_range(min(xs), max(xs)), _nice_range(min(ys), max(ys)))
    body = frame.axes(title, "speed-up ratio", "accuracy")
    legend = []
    for i, c in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(zip(c["speedup"], c["accuracy"]))
        if c.get("point"):
            for sx, ac in pts:
                cx, cy = frame.x(sx), frame.y(ac)
                body.append(f'<path d="M{_fmt(cx)} {_fmt(cy - 7)} l7 7 l-7 7 l-7 -7 z" fill="{color}"/>')
        else:
            if len(pts) > 1:
                path = " ".join(f"{_fmt(frame.x(a))},{_fmt(frame.y(b))}" for a, b in pts)
                body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            for a, b in pts:
                body.append(f'<circle cx="{_fmt(frame.x(a))}" cy="{_fmt(frame.y(b))}" r="2.5" fill="{color}"/>')
        legend.append((c["label"], color, bool(c.get("point"))))
    return _document(body + _legend(legend))


def histogram_svg(series: dict[str, list[int]], title: str) -> str:
    """Grouped bars of exit-layer fractions, one group per layer."""
    labels = list(series)
    n_layers = max((len(v) for v in series.values()), default=1)
    fracs = {k: [c / max(sum(v), 1) for c in v] for k, v in series.items()}
    top = max((f for v in fracs.values() for f in v), default=1.0) or 1.0
    frame = _Frame((0.5, n_layers + 0.5), (0.0, top * 1.05))
    body = [
        f'<rect x="{LEFT}" y="{TOP}" width="{frame.pw}" height="{frame.ph}" fill="none" stroke="#333"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{LEFT + frame.pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">exit layer</text>',
        f'<text x="16" y="{TOP + frame.ph / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {TOP + frame.ph / 2:.0f})">fraction of samples</text>',
    ]
    for m in range(1, n_layers + 1):
        body.append(f'<text x="{_fmt(frame.x(m))}" y="{TOP + frame.ph + 18}" text-anchor="middle" '
                    f'font-size="11">{m}</text>')
    for i in range(6):
        yv = frame.y1 * i / 5
        body.append(f'<text x="{LEFT - 6}" y="{_fmt(frame.y(yv) + 4)}" text-anchor="end" font-size="11">'
                    f'{yv:.2f}</text>')
    group = 0.8 / max(len(labels), 1)
    legend = []
    for j, name in enumerate(labels):
        color = PALETTE[j % len(PALETTE)]
        for m, f in enumerate(fracs[name], 1):
            left = m - 0.4 + j * group
            x0, x1 = frame.x(left), frame.x(left + group)
            y = frame.y(f)
            body.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y)}" width="{_fmt(x1 - x0)}" '
                        f'height="{_fmt(frame.y(0) - y)}" fill="{color}"/>')
        legend.append((name, color, False))
    return _document(body + _legend(legend))
