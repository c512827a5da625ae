"""
Small, dependency-free SVG plot emitter.

Output is plain text with fixed numeric formatting so files diff cleanly.
A creation timestamp goes into ``<metadata>`` unless ``deterministic`` is
set, in which case two runs on the same data produce identical bytes.
"""
from __future__ import annotations

import datetime as _dt
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
MARGIN = dict(left=64, right=150, top=36, bottom=48)
PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c", "#444444")
DASHES = ("", "6,4", "12,4", "2,3", "8,3,2,3")


def _fmt(v):
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return []
    if hi == lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [round(float(t), 10) for t in np.arange(start, hi + step * 1e-9, step)]


class Figure:
    """One x/y panel.

    Parameters
    ----------
    title, xlabel, ylabel : str
    xlim, ylim : (float, float), optional
        Data limits; inferred from the layers when omitted.
    """

    def __init__(self, title="", xlabel="", ylabel="", xlim=None, ylim=None):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.xlim, self.ylim = xlim, ylim
        self._layers = []
        self._legend = []
        self._xcats = None

    # ------------------------------------------------------------ layers
    def line(self, x, y, label=None, style=0, dash=None, step=False):
        x, y = np.asarray(x, float), np.asarray(y, float)
        if step:
            xs = np.repeat(x, 2)[1:]
            ys = np.repeat(y, 2)[:-1]
            x, y = xs, ys
        self._layers.append(("line", x, y, style, DASHES[dash if dash is not None else 0]))
        if label:
            self._legend.append((label, style, DASHES[dash if dash is not None else 0], "line"))
        return self

    def band(self, x, lo, hi, style=0, label=None):
        self._layers.append(("band", np.asarray(x, float), np.asarray(lo, float),
                             np.asarray(hi, float), style))
        if label:
            self._legend.append((label, style, "", "band"))
        return self

    def points(self, x, y, label=None, style=0):
        self._layers.append(("points", np.asarray(x, float), np.asarray(y, float), style))
        if label:
            self._legend.append((label, style, "", "points"))
        return self

    def hline(self, y, style=6, dash=1):
        self._layers.append(("hline", float(y), style, DASHES[dash]))
        return self

    def vline(self, x, style=6, dash=1):
        self._layers.append(("vline", float(x), style, DASHES[dash]))
        return self

    def categories(self, labels):
        """Label integer x positions ``0..n-1`` with ``labels``."""
        self._xcats = list(labels)
        return self

    # ------------------------------------------------------------ render
    def _limits(self):
        xs, ys = [], []
        for layer in self._layers:
            kind = layer[0]
            if kind in ("line", "points"):
                xs.append(layer[1])
                ys.append(layer[2])
            elif kind == "band":
                xs.append(layer[1])
                ys += [layer[2], layer[3]]
            elif kind == "hline":
                ys.append(np.array([layer[1]]))
            elif kind == "vline":
                xs.append(np.array([layer[1]]))

        def lim(arrs, given):
            if given is not None:
                return tuple(map(float, given))
            vals = np.concatenate(arrs) if arrs else np.array([0.0, 1.0])
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                return 0.0, 1.0
            lo, hi = float(vals.min()), float(vals.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            pad = 0.04 * (hi - lo)
            return lo - pad, hi + pad

        return lim(xs, self.xlim), lim(ys, self.ylim)

    def to_svg(self, deterministic=True):
        (x0, x1), (y0, y1) = self._limits()
        pl, pr = MARGIN["left"], W - MARGIN["right"]
        pt, pb = MARGIN["top"], H - MARGIN["bottom"]

        def sx(v):
            return pl + (v - x0) / (x1 - x0) * (pr - pl)

        def sy(v):
            return pb - (v - y0) / (y1 - y0) * (pb - pt)

        def path(x, y):
            ok = np.isfinite(x) & np.isfinite(y)
            pts = [f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[ok], y[ok])]
            return " ".join(pts)

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
               f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">']
        if not deterministic:
            stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
            out.append(f"<metadata>created {stamp}</metadata>")
        out.append(f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>')
        out.append(f'<text x="{W / 2 - MARGIN["right"] / 2:.0f}" y="20" text-anchor="middle" '
                   f'font-size="13">{escape(self.title)}</text>')
        out.append(f'<rect x="{pl}" y="{pt}" width="{pr - pl}" height="{pb - pt}" '
                   'fill="none" stroke="#999"/>')
        if self._xcats is not None:
            xt = [(i, lab) for i, lab in enumerate(self._xcats) if x0 <= i <= x1]
        else:
            xt = [(t, f"{t:g}") for t in _ticks(x0, x1)]
        for t, lab in xt:
            out.append(f'<line x1="{_fmt(sx(t))}" y1="{pb}" x2="{_fmt(sx(t))}" y2="{pb + 4}" stroke="#999"/>')
            out.append(f'<text x="{_fmt(sx(t))}" y="{pb + 16}" text-anchor="middle">{escape(str(lab))}</text>')
        for t in _ticks(y0, y1):
            out.append(f'<line x1="{pl - 4}" y1="{_fmt(sy(t))}" x2="{pl}" y2="{_fmt(sy(t))}" stroke="#999"/>')
            out.append(f'<text x="{pl - 6}" y="{_fmt(sy(t) + 4)}" text-anchor="end">{t:g}</text>')
        out.append(f'<text x="{(pl + pr) / 2:.0f}" y="{H - 10}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="16" y="{(pt + pb) / 2:.0f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {(pt + pb) / 2:.0f})">{escape(self.ylabel)}</text>')
        out.append(f'<clipPath id="plot"><rect x="{pl}" y="{pt}" width="{pr - pl}" height="{pb - pt}"/></clipPath>')
        out.append('<g clip-path="url(#plot)">')
        for layer in self._layers:
            kind = layer[0]
            if kind == "line":
                _, x, y, st, dash = layer
                d = f' stroke-dasharray="{dash}"' if dash else ""
                out.append(f'<polyline fill="none" stroke="{PALETTE[st % len(PALETTE)]}" '
                           f'stroke-width="1.6"{d} points="{path(x, y)}"/>')
            elif kind == "band":
                _, x, lo, hi, st = layer
                pts = path(np.r_[x, x[::-1]], np.r_[lo, hi[::-1]])
                out.append(f'<polygon fill="{PALETTE[st % len(PALETTE)]}" fill-opacity="0.18" '
                           f'stroke="none" points="{pts}"/>')
            elif kind == "points":
                _, x, y, st = layer
                for a, b in zip(x, y):
                    if np.isfinite(a) and np.isfinite(b):
                        out.append(f'<circle cx="{_fmt(sx(a))}" cy="{_fmt(sy(b))}" r="3" '
                                   f'fill="{PALETTE[st % len(PALETTE)]}"/>')
            elif kind == "hline":
                _, y, st, dash = layer
                out.append(f'<line x1="{pl}" y1="{_fmt(sy(y))}" x2="{pr}" y2="{_fmt(sy(y))}" '
                           f'stroke="{PALETTE[st % len(PALETTE)]}" stroke-dasharray="{dash}"/>')
            elif kind == "vline":
                _, x, st, dash = layer
                out.append(f'<line x1="{_fmt(sx(x))}" y1="{pt}" x2="{_fmt(sx(x))}" y2="{pb}" '
                           f'stroke="{PALETTE[st % len(PALETTE)]}" stroke-dasharray="{dash}"/>')
        out.append("</g>")
        for i, (label, st, dash, kind) in enumerate(self._legend):
            ly = pt + 12 + 16 * i
            col = PALETTE[st % len(PALETTE)]
            if kind == "points":
                out.append(f'<circle cx="{pr + 22}" cy="{ly - 4}" r="3" fill="{col}"/>')
            elif kind == "band":
                out.append(f'<rect x="{pr + 12}" y="{ly - 9}" width="20" height="10" '
                           f'fill="{col}" fill-opacity="0.18"/>')
            else:
                d = f' stroke-dasharray="{dash}"' if dash else ""
                out.append(f'<line x1="{pr + 12}" y1="{ly - 4}" x2="{pr + 32}" y2="{ly - 4}" '
                           f'stroke="{col}" stroke-width="1.6"{d}/>')
            out.append(f'<text x="{pr + 38}" y="{ly}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path, deterministic=True):
        Path(path).write_text(self.to_svg(deterministic), encoding="utf-8")


def histogram_polygon(values, bins=20, range_=None):
    """Frequency-polygon vertices ``(centres, densities)`` of ``values``."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return np.empty(0), np.empty(0)
    dens, edges = np.histogram(v, bins=bins, range=range_, density=True)
    centres = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    return np.r_[centres[0] - width, centres, centres[-1] + width], np.r_[0.0, dens, 0.0]
