"""Plain SVG plots of reachable sets, output polytopes and partitions.

Output is byte-stable: coordinates are printed with fixed precision and
elements are emitted in input order.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

SAMPLE_COLOR = "#1f77b4"
PALETTE = ("#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull of 2-D points (monotone chain)."""
    pts = np.unique(np.round(np.asarray(points, dtype=float), 12), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def clip_halfplane(poly: np.ndarray, a, b) -> np.ndarray:
    """Part of convex polygon ``poly`` with ``a . x <= b``."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp, fq = a @ p - b, a @ q - b
        if fp <= 0:
            out.append(p)
        if fp * fq < 0:
            out.append(p + (q - p) * (fp / (fp - fq)))
    return np.array(out).reshape(-1, 2)


def polytope_vertices(directions, offsets, bound: float = 1e6) -> np.ndarray:
    """Vertices of the 2-D polygon ``{z : directions @ z <= offsets}``."""
    poly = np.array([[-bound, -bound], [bound, -bound], [bound, bound], [-bound, bound]])
    for a, b in zip(np.asarray(directions, dtype=float), np.asarray(offsets, dtype=float)):
        poly = clip_halfplane(poly, a, b)
        if not len(poly):
            break
    return poly


def project_rectangle(rect, axes) -> np.ndarray:
    """Hull of a rotated rectangle's vertices after keeping only ``axes``."""
    return convex_hull(rect.vertices()[:, list(axes)])


class _Canvas:
    def __init__(self, width, height, margin=48):
        self.width, self.height, self.margin = width, height, margin
        self.lo = np.array([np.inf, np.inf])
        self.hi = -self.lo

    def include(self, pts):
        pts = np.atleast_2d(pts)
        if pts.size:
            self.lo = np.minimum(self.lo, pts.min(axis=0))
            self.hi = np.maximum(self.hi, pts.max(axis=0))

    def finish(self):
        if not np.all(np.isfinite(self.lo)):
            self.lo, self.hi = np.zeros(2), np.ones(2)
        span = self.hi - self.lo
        pad = np.where(span > 0, 0.05 * span, 0.5)
        self.lo, self.hi = self.lo - pad, self.hi + pad

    def xy(self, pts):
        pts = np.atleast_2d(pts)
        m = self.margin
        sx = (self.width - 2 * m) / (self.hi[0] - self.lo[0])
        sy = (self.height - 2 * m) / (self.hi[1] - self.lo[1])
        x = m + (pts[:, 0] - self.lo[0]) * sx
        y = self.height - m - (pts[:, 1] - self.lo[1]) * sy
        return np.column_stack([x, y])


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _points_attr(xy) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in xy)


def render_svg(
    sets: Sequence = (),
    trajectories: Optional[np.ndarray] = None,
    axes=(0, 1),
    polygons: Sequence = (),
    partitions: Sequence = (),
    title: Optional[str] = None,
    labels: Optional[Sequence[str]] = None,
    width: int = 480,
    height: int = 480,
) -> str:
    """Render a 2-D projection as an SVG document.

    Parameters
    ----------
    sets
        Rotated rectangles, drawn as the hull of their projected vertices.
    trajectories
        ``(p, T, n)`` state sequences or ``(m, n)`` points, drawn as dots.
    axes
        The two coordinates kept by the projection.
    polygons
        Extra ``(k, 2)`` vertex arrays, e.g. an output polytope.
    partitions
        Axis-aligned boxes (objects with ``lower``/``upper``) in 2-D, drawn
        as thin outlines.
    """
    axes = tuple(int(a) for a in axes)
    if len(axes) != 2 or axes[0] == axes[1]:
        raise ValueError("need two distinct projection axes")
    canvas = _Canvas(width, height)
    shapes = [project_rectangle(s, axes) for s in sets]
    extra = [np.asarray(p, dtype=float).reshape(-1, 2) for p in polygons]
    boxes = [
        np.array([[b.lower[0], b.lower[1]], [b.upper[0], b.lower[1]],
                  [b.upper[0], b.upper[1]], [b.lower[0], b.upper[1]]])
        for b in partitions
    ]
    pts = None
    if trajectories is not None:
        traj = np.asarray(trajectories, dtype=float)
        if traj.size:
            pts = traj.reshape(-1, traj.shape[-1])[:, list(axes)]
    for group in (shapes, extra, boxes):
        for poly in group:
            canvas.include(poly)
    if pts is not None:
        canvas.include(pts)
    canvas.finish()

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    for poly in boxes:
        out.append(f'<polygon points="{_points_attr(canvas.xy(poly))}" fill="none" '
                   f'stroke="#888888" stroke-width="0.5"/>')
    for poly in shapes:
        out.append(f'<polygon points="{_points_attr(canvas.xy(poly))}" fill="#bbbbbb" '
                   f'fill-opacity="0.35" stroke="#555555" stroke-width="1"/>')
    for k, poly in enumerate(extra):
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<polygon points="{_points_attr(canvas.xy(poly))}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
    if pts is not None:
        for x, y in canvas.xy(pts):
            out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="1.2" fill="{SAMPLE_COLOR}"/>')

    names = list(labels) if labels else [f"x{axes[0]}", f"x{axes[1]}"]
    out.append(f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" font-size="12">{names[0]}</text>')
    out.append(f'<text x="12" y="{height // 2}" font-size="12" '
               f'transform="rotate(-90 12 {height // 2})">{names[1]}</text>')
    for side, value, anchor in ((0, canvas.lo, "start"), (1, canvas.hi, "end")):
        x = canvas.margin if side == 0 else width - canvas.margin
        out.append(f'<text x="{x}" y="{height - canvas.margin + 14}" text-anchor="{anchor}" '
                   f'font-size="10">{_fmt(value[0])}</text>')
    out.append(f'<text x="{canvas.margin - 4}" y="{height - canvas.margin}" text-anchor="end" '
               f'font-size="10">{_fmt(canvas.lo[1])}</text>')
    out.append(f'<text x="{canvas.margin - 4}" y="{canvas.margin + 4}" text-anchor="end" '
               f'font-size="10">{_fmt(canvas.hi[1])}</text>')

    legend = []
    if shapes:
        legend.append(("#bbbbbb", "over-approximation"))
    if extra:
        legend.append((PALETTE[0], "polytope"))
    if boxes:
        legend.append(("#888888", "partitions"))
    if pts is not None:
        legend.append((SAMPLE_COLOR, "samples"))
    for i, (color, text) in enumerate(legend):
        y = canvas.margin + 14 * i
        out.append(f'<rect x="{width - 150}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{width - 135}" y="{y + 1}" font-size="11">{text}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
