from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class PolygonLabel:
    vertices: list  # [(x, y), ...] in pixels
    label: str = "trip"

    def to_dict(self) -> dict:
        return {"class": self.label, "vertices": [[float(x), float(y)] for x, y in self.vertices]}

    @classmethod
    def from_dict(cls, d: dict) -> "PolygonLabel":
        verts = [(float(x), float(y)) for x, y in d["vertices"]]
        return cls(verts, d.get("class", "trip"))

    def is_degenerate(self) -> bool:
        return len({(round(x, 9), round(y, 9)) for x, y in self.vertices}) < 3


def polygon_mask(vertices, width: int, height: int) -> np.ndarray:
    """Even-odd fill: a pixel is inside iff its centre (x+0.5, y+0.5) is."""
    v = np.asarray(vertices, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    if len(v) < 3:
        return mask
    x0 = max(int(np.floor(v[:, 0].min())) - 1, 0)
    x1 = min(int(np.ceil(v[:, 0].max())) + 1, width)
    y0 = max(int(np.floor(v[:, 1].min())) - 1, 0)
    y1 = min(int(np.ceil(v[:, 1].max())) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return mask
    px = np.arange(x0, x1) + 0.5
    py = (np.arange(y0, y1) + 0.5)[:, None]
    inside = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    for (ax, ay), (bx, by) in zip(v, np.roll(v, -1, axis=0)):
        if ay == by:
            continue
        straddle = (ay > py) != (by > py)
        xcross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= straddle & (px < xcross)
    mask[y0:y1, x0:x1] = inside
    return mask


def rasterize(polygons, width: int, height: int) -> np.ndarray:
    """Union of the even-odd masks of all non-degenerate polygons."""
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        if poly.is_degenerate():
            log.warning("skipping degenerate polygon with %d vertices", len(poly.vertices))
            continue
        mask |= polygon_mask(poly.vertices, width, height)
    return mask


def instance_masks(polygons, width: int, height: int) -> list:
    return [polygon_mask(p.vertices, width, height) for p in polygons if not p.is_degenerate()]


def clip_to_rect(vertices, width: float, height: float) -> list:
    """Sutherland-Hodgman clip of a polygon to [0, width] x [0, height]."""
    def clip(pts, inside, cross):
        out = []
        for i, cur in enumerate(pts):
            prev = pts[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
        return out

    def at_x(x):
        return lambda p, q: (x, p[1] + (q[1] - p[1]) * (x - p[0]) / (q[0] - p[0]))

    def at_y(y):
        return lambda p, q: (p[0] + (q[0] - p[0]) * (y - p[1]) / (q[1] - p[1]), y)

    pts = [tuple(map(float, p)) for p in vertices]
    for inside, cross in (
        (lambda p: p[0] >= 0, at_x(0.0)),
        (lambda p: p[0] <= width, at_x(float(width))),
        (lambda p: p[1] >= 0, at_y(0.0)),
        (lambda p: p[1] <= height, at_y(float(height))),
    ):
        if not pts:
            break
        pts = clip(pts, inside, cross)
    return pts
