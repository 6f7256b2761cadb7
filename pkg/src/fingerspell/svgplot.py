"""Self-contained SVG chart emission: confusion heatmap, ROC curve, the
CER-vs-accepted progress curve, and per-frame timelines.

Everything is built as plain strings; the only consumers are report files, so
there is no figure object model, just functions returning one SVG document
each.
"""
from __future__ import annotations

import colorsys
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .datamodel import DataError, LETTERS
from .metrics import ConfusionMatrix

_FONT = "font-family=\"monospace\""


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


class _Svg:
    """Accumulates elements, renders one standalone SVG document."""

    def __init__(self, width: float, height: float):
        self.width = width
        self.height = height
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill, title=None, stroke=None):
        attrs = (f'x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
                 f'height="{_fmt(h)}" fill={quoteattr(fill)}')
        if stroke:
            attrs += f' stroke={quoteattr(stroke)}'
        if title is None:
            self.parts.append(f"<rect {attrs}/>")
        else:
            self.parts.append(
                f"<rect {attrs}><title>{escape(title)}</title></rect>")

    def line(self, x1, y1, x2, y2, stroke="#444", dash=None, width=1.0):
        attrs = (f'x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
                 f'y2="{_fmt(y2)}" stroke={quoteattr(stroke)} '
                 f'stroke-width="{_fmt(width)}"')
        if dash:
            attrs += f' stroke-dasharray="{dash}"'
        self.parts.append(f"<line {attrs}/>")

    def polyline(self, points, stroke, width=1.5):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.parts.append(
            f'<polyline points="{pts}" fill="none" '
            f'stroke={quoteattr(stroke)} stroke-width="{_fmt(width)}"/>')

    def circle(self, cx, cy, r, fill):
        self.parts.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" '
                          f'r="{_fmt(r)}" fill={quoteattr(fill)}/>')

    def text(self, x, y, s, size=10, anchor="start", fill="#222"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" {_FONT} '
            f'text-anchor="{anchor}" fill={quoteattr(fill)}>{escape(s)}</text>')

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            '<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{_fmt(self.width)}" height="{_fmt(self.height)}" '
            f'viewBox="0 0 {_fmt(self.width)} {_fmt(self.height)}">\n'
            f'<rect x="0" y="0" width="{_fmt(self.width)}" '
            f'height="{_fmt(self.height)}" fill="#ffffff"/>\n'
            f"{body}\n</svg>\n")


def _heat_color(v: float) -> str:
    """0 -> white, 1 -> saturated blue."""
    v = min(max(float(v), 0.0), 1.0)
    r = int(round(255 - 205 * v))
    g = int(round(255 - 165 * v))
    b = 255
    return f"#{r:02x}{g:02x}{b:02x}"


def _letter_color(c: str) -> str:
    """A stable distinct-ish hue per letter; blank is light gray."""
    if c == "-":
        return "#e8e8e8"
    h = (ord(c) - ord("a")) / 26.0
    r, g, b = colorsys.hls_to_rgb(h, 0.72, 0.65)
    return f"#{int(r*255):02x}{int(g*255):02x}{int(b*255):02x}"


def svg_confusion(cm: ConfusionMatrix, title: str = "letter confusion") -> str:
    """Row-normalized 26x26 heatmap, ground truth on rows."""
    pct = cm.row_percent()
    if pct.shape != (26, 26):
        raise DataError(f"confusion matrix must be 26x26, got {pct.shape}")
    cell = 16
    left, top = 40, 40
    svg = _Svg(left + 26 * cell + 20, top + 26 * cell + 20)
    svg.text(left, 18, title, size=12)
    for j, c in enumerate(LETTERS):
        svg.text(left + j * cell + cell / 2, top - 6, c, anchor="middle")
    for i, c in enumerate(LETTERS):
        svg.text(left - 8, top + i * cell + cell * 0.7, c, anchor="end")
        for j in range(26):
            svg.rect(left + j * cell, top + i * cell, cell, cell,
                     fill=_heat_color(pct[i, j] / 100.0),
                     title=f"gt {c} -> pred {LETTERS[j]}: "
                           f"{int(cm.counts[i, j])} ({pct[i, j]:.1f}%)")
    return svg.render()


def svg_roc(curve: np.ndarray, auc: float | None = None,
            title: str = "detector ROC") -> str:
    """ROC polyline with the chance diagonal; curve rows are (FPR, TPR)."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 2 or curve.shape[1] != 2 or curve.shape[0] < 2:
        raise DataError(f"curve must be (N>=2, 2), got {curve.shape}")
    if np.any(curve < -1e-9) or np.any(curve > 1 + 1e-9):
        raise DataError("ROC points must lie in [0,1]^2")
    size, pad = 260, 40
    svg = _Svg(size + 2 * pad, size + 2 * pad)
    label = title if auc is None else f"{title} (AUC {auc:.3f})"
    svg.text(pad, 20, label, size=12)

    def sx(fpr):
        return pad + fpr * size

    def sy(tpr):
        return pad + size - tpr * size

    svg.rect(pad, pad, size, size, fill="#ffffff", stroke="#333")
    svg.line(sx(0), sy(0), sx(1), sy(1), stroke="#bbb", dash="4,3")
    for v in (0.0, 0.5, 1.0):
        svg.text(sx(v), pad + size + 16, f"{v:.1f}", anchor="middle")
        svg.text(pad - 6, sy(v) + 4, f"{v:.1f}", anchor="end")
    svg.text(sx(0.5), pad + size + 32, "false positive rate", anchor="middle")
    svg.polyline([(sx(f), sy(t)) for f, t in curve], stroke="#c23b22")
    return svg.render()


def svg_cer_curve(rows, title: str = "held-out CER by iteration") -> str:
    """Progress curve: CER over iterations, accepted counts along the top.

    ``rows`` are the pipeline metrics records {iteration, accepted,
    heldout_cer}, in iteration order.
    """
    rows = list(rows)
    if not rows:
        raise DataError("no metrics rows to plot")
    for r in rows:
        if not {"iteration", "accepted", "heldout_cer"} <= set(r):
            raise DataError(f"metrics row missing keys: {r}")
    w, h, pad = 300, 200, 44
    svg = _Svg(w + 2 * pad, h + 2 * pad)
    svg.text(pad, 20, title, size=12)
    svg.rect(pad, pad, w, h, fill="#ffffff", stroke="#333")
    n = len(rows)
    top = max(max(r["heldout_cer"] for r in rows), 1e-9)

    def sx(i):
        return pad + (w / 2 if n == 1 else i * w / (n - 1))

    def sy(v):
        return pad + h - (v / top) * h

    pts = [(sx(i), sy(r["heldout_cer"])) for i, r in enumerate(rows)]
    svg.polyline(pts, stroke="#2a6f97", width=2.0)
    for (x, y), r in zip(pts, rows):
        svg.circle(x, y, 3, fill="#2a6f97")
        svg.text(x, y - 8, f"{r['heldout_cer']:.3f}", anchor="middle", size=9)
        svg.text(x, pad - 6, f"+{r['accepted']}", anchor="middle", size=9,
                 fill="#666")
        svg.text(x, pad + h + 16, str(r["iteration"]), anchor="middle")
    svg.text(pad + w / 2, pad + h + 32, "iteration (labels: accepted count)",
             anchor="middle")
    svg.text(pad - 28, pad + h / 2, "CER", anchor="middle")
    return svg.render()


def svg_mask_timeline(tracks, title: str = "detection timeline") -> str:
    """Binary activity rows (e.g. ground truth vs smoothed prediction).

    ``tracks`` is a list of (name, 0/1 array); all tracks share the time axis.
    """
    tracks = [(str(name), np.asarray(m).astype(np.int64).ravel())
              for name, m in tracks]
    if not tracks:
        raise DataError("no tracks to plot")
    T = len(tracks[0][1])
    if T == 0 or any(len(m) != T for _, m in tracks):
        raise DataError("tracks must be non-empty and equal-length")
    for _, m in tracks:
        if np.any((m != 0) & (m != 1)):
            raise DataError("mask tracks must be binary")
    left, row_h, gap, top = 110, 18, 8, 36
    width = max(T * 3, 120)
    svg = _Svg(left + width + 20, top + len(tracks) * (row_h + gap) + 24)
    svg.text(left, 18, title, size=12)
    px = width / T
    for k, (name, m) in enumerate(tracks):
        y = top + k * (row_h + gap)
        svg.text(left - 8, y + row_h * 0.7, name, anchor="end")
        svg.rect(left, y, width, row_h, fill="#f3f3f3")
        t = 0
        while t < T:  # contiguous active runs as single rects
            if m[t] == 1:
                u = t
                while u < T and m[u] == 1:
                    u += 1
                svg.rect(left + t * px, y, (u - t) * px, row_h, fill="#2a9d8f",
                         title=f"{name}: frames {t}..{u - 1}")
                t = u
            else:
                t += 1
    svg.text(left, top + len(tracks) * (row_h + gap) + 14,
             f"{T} frames", size=9, fill="#666")
    return svg.render()


def svg_letter_strip(tracks, title: str = "per-frame letters") -> str:
    """Letter-per-frame strips (ground truth vs predicted labels).

    ``tracks`` is a list of (name, label string over a-z and '-'); equal
    lengths required.
    """
    tracks = [(str(name), str(labels)) for name, labels in tracks]
    if not tracks:
        raise DataError("no tracks to plot")
    T = len(tracks[0][1])
    if T == 0 or any(len(s) != T for _, s in tracks):
        raise DataError("label strips must be non-empty and equal-length")
    for _, s in tracks:
        bad = {c for c in s if c != "-" and not "a" <= c <= "z"}
        if bad:
            raise DataError(f"labels outside alphabet+blank: {sorted(bad)}")
    cell, row_h, gap, left, top = 14, 20, 10, 110, 36
    svg = _Svg(left + T * cell + 20, top + len(tracks) * (row_h + gap) + 10)
    svg.text(left, 18, title, size=12)
    for k, (name, s) in enumerate(tracks):
        y = top + k * (row_h + gap)
        svg.text(left - 8, y + row_h * 0.7, name, anchor="end")
        for t, c in enumerate(s):
            svg.rect(left + t * cell, y, cell, row_h, fill=_letter_color(c),
                     stroke="#ffffff")
            if c != "-":
                svg.text(left + t * cell + cell / 2, y + row_h * 0.72, c,
                         anchor="middle", size=9)
    return svg.render()
